//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::GroundingModel;
use super::params::{Grads, ParamSet};
use crate::error::{Error, Result};

/// Anything that owns a [`ParamSet`] that a loss can be evaluated against.
pub trait HasParams {
    fn param_set(&self) -> &ParamSet;
    fn param_set_mut(&mut self) -> &mut ParamSet;
}

impl HasParams for ParamSet {
    fn param_set(&self) -> &ParamSet {
        self
    }
    fn param_set_mut(&mut self) -> &mut ParamSet {
        self
    }
}

impl HasParams for GroundingModel {
    fn param_set(&self) -> &ParamSet {
        &self.params
    }
    fn param_set_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Minimum number of scalars to probe; every block contributes at least one.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            samples: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `name[flat_index]` of the worst scalar.
    pub worst_parameter: String,
    pub checked: usize,
    /// Worst relative error per parameter block that was probed.
    pub per_block: Vec<(String, f64)>,
    pub passed: bool,
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn gradcheck<M, F>(target: &mut M, analytic: &Grads, mut loss_fn: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    M: HasParams,
    F: FnMut(&M) -> Result<f64>,
{
    if !(opts.step > 0.0 && opts.step.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {}", opts.step)));
    }
    let first = loss_fn(target)?;
    let second = loss_fn(target)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::InvalidState(format!(
            "loss function is not deterministic ({first} vs {second})"
        )));
    }

    let picks = sample_scalars(target.param_set(), opts.samples, opts.seed);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_parameter: String::new(),
        checked: 0,
        per_block: Vec::new(),
        passed: true,
    };
    let mut block_worst: Vec<Option<f64>> = vec![None; target.param_set().len()];
    for (block, idx) in picks {
        let original = target.param_set().block(block).value.data()[idx];
        target.param_set_mut().block_mut(block).value.data_mut()[idx] = original + opts.step;
        let plus = loss_fn(target);
        target.param_set_mut().block_mut(block).value.data_mut()[idx] = original - opts.step;
        let minus = loss_fn(target);
        target.param_set_mut().block_mut(block).value.data_mut()[idx] = original;
        let numeric = (plus? - minus?) / (2.0 * opts.step);
        let a = analytic.blocks()[block].data()[idx];
        let err = relative_error(a, numeric);
        report.checked += 1;
        let w = block_worst[block].get_or_insert(0.0);
        *w = w.max(err);
        if err > report.max_rel_error || report.worst_parameter.is_empty() {
            report.max_rel_error = err;
            report.worst_parameter = format!("{}[{idx}]", target.param_set().block(block).name);
        }
    }
    report.per_block = block_worst
        .iter()
        .enumerate()
        .filter_map(|(b, w)| w.map(|w| (target.param_set().block(b).name.clone(), w)))
        .collect();
    report.passed = report.max_rel_error < opts.tolerance;
    Ok(report)
}

/// Deterministic subsample: one scalar from every non-empty block, then
/// uniform draws until `samples` distinct scalars are chosen.
fn sample_scalars(params: &ParamSet, samples: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = params.iter().map(|p| p.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut chosen = BTreeSet::new();
    if total <= samples {
        for (b, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                chosen.insert((b, i));
            }
        }
        return chosen.into_iter().collect();
    }
    for (b, &n) in sizes.iter().enumerate() {
        if n > 0 {
            chosen.insert((b, rng.random_range(0..n)));
        }
    }
    let mut offsets = Vec::with_capacity(sizes.len());
    let mut acc = 0;
    for &n in &sizes {
        offsets.push(acc);
        acc += n;
    }
    while chosen.len() < samples {
        let flat = rng.random_range(0..total);
        let b = offsets.partition_point(|&o| o <= flat) - 1;
        chosen.insert((b, flat - offsets[b]));
    }
    chosen.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::matrix::Matrix;

    fn quadratic_setup() -> (ParamSet, Grads) {
        let mut ps = ParamSet::new();
        ps.add("a", Matrix::from_vec(3, 4, (0..12).map(|i| 0.5 + i as f64 * 0.1).collect()).unwrap());
        ps.add("b", Matrix::from_vec(1, 5, vec![2.0, -0.5, 0.75, -1.25, 1.5]).unwrap());
        let mut g = ps.zeros_like();
        for (gb, p) in g.blocks_mut().iter_mut().zip(ps.iter()) {
            gb.data_mut().copy_from_slice(p.value.data());
        }
        (ps, g)
    }

    fn half_norm_sq(ps: &ParamSet) -> Result<f64> {
        Ok(ps.iter().map(|p| p.value.sum_squares()).sum::<f64>() * 0.5)
    }

    #[test]
    fn quadratic_loss_matches() {
        let (mut ps, g) = quadratic_setup();
        let report = gradcheck(&mut ps, &g, half_norm_sq, &GradcheckOptions::default()).unwrap();
        assert_eq!(report.checked, 17);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert!(report.passed);
        assert_eq!(report.per_block.len(), 2);
    }

    #[test]
    fn detects_wrong_gradient() {
        let (mut ps, mut g) = quadratic_setup();
        g.blocks_mut()[1].data_mut()[4] = 0.0;
        let report = gradcheck(&mut ps, &g, half_norm_sq, &GradcheckOptions::default()).unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst_parameter, "b[4]");
    }

    #[test]
    fn rejects_bad_step_and_nondeterminism() {
        let (mut ps, g) = quadratic_setup();
        let opts = GradcheckOptions {
            step: 0.0,
            ..Default::default()
        };
        assert!(matches!(gradcheck(&mut ps, &g, half_norm_sq, &opts), Err(Error::InvalidArgument(_))));
        let mut calls = 0.0;
        let flaky = |_: &ParamSet| {
            calls += 1.0;
            Ok(calls)
        };
        assert!(matches!(
            gradcheck(&mut ps, &g, flaky, &GradcheckOptions::default()),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn subsample_covers_every_block() {
        let mut ps = ParamSet::new();
        for i in 0..10 {
            ps.add(format!("p{i}"), Matrix::zeros(10, 10));
        }
        let picks = sample_scalars(&ps, 50, 3);
        assert_eq!(picks.len(), 50);
        for b in 0..10 {
            assert!(picks.iter().any(|&(pb, _)| pb == b));
        }
        assert_eq!(picks, sample_scalars(&ps, 50, 3));
    }
}
