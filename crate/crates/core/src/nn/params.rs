//! Flat, named parameter storage shared by the model, the optimizer, the
//! gradient checker and the checkpoint codec.

use rand::Rng;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Handle to one parameter block inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform weight of shape `fan_in x fan_out`.
    pub(crate) fn add_glorot(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.add(name, Matrix::from_vec(fan_in, fan_out, data).expect("shape"))
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn block(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn block_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Zero gradients with the same block shapes.
    pub fn zeros_like(&self) -> Grads {
        Grads {
            blocks: self
                .params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    /// Rounds every value to the nearest `f32`, i.e. the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_layout(&self, names_shapes: &[(String, usize, usize)]) -> Result<()> {
        if names_shapes.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter blocks, found {}",
                self.params.len(),
                names_shapes.len()
            )));
        }
        for (p, (name, rows, cols)) in self.params.iter().zip(names_shapes) {
            if &p.name != name || p.value.shape() != (*rows, *cols) {
                return Err(Error::Shape(format!(
                    "parameter `{}` {:?} does not match `{name}` ({rows}x{cols})",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Gradient blocks aligned index-for-index with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    blocks: Vec<Matrix>,
}

impl Grads {
    #[inline]
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.blocks[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.blocks[id.0]
    }

    pub fn blocks(&self) -> &[Matrix] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Matrix] {
        &mut self.blocks
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.blocks.iter_mut().for_each(|b| b.scale(s));
    }

    pub fn global_norm(&self) -> f64 {
        self.blocks.iter().map(Matrix::sum_squares).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(Matrix::is_finite)
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().all(|b| b.data().iter().all(|&v| v == 0.0))
    }
}
