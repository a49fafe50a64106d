//! Differentiable building blocks. Every `forward` returns the output plus
//! whatever the matching `backward` needs; `backward` accumulates parameter
//! gradients into [`Grads`] and returns the gradient of the input.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::matrix::{gemm_into, Matrix};
use super::params::{Grads, ParamId, ParamSet};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Dropout source. `rng == None` means evaluation mode.
pub struct Dropout {
    pub rate: f64,
    pub rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn eval() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    /// Samples a keep-mask of scale factors (`0` or `1 / (1 - rate)`), or
    /// `None` when dropout is inactive.
    fn sample(&mut self, n: usize) -> Option<Vec<f64>> {
        let rng = self.rng.as_mut()?;
        if self.rate <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.rate);
        Some(
            (0..n)
                .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { keep })
                .collect(),
        )
    }
}

fn apply_mask(x: &mut Matrix, mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, s) in x.data_mut().iter_mut().zip(m) {
            *v *= s;
        }
    }
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = params.add_glorot(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = params.add(format!("{name}.bias"), Matrix::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn forward(&self, p: &ParamSet, x: &Matrix) -> Matrix {
        let w = p.get(self.weight);
        let mut y = Matrix::zeros(x.rows(), w.cols());
        gemm_into(1.0, x, false, w, false, 0.0, &mut y);
        y.add_row_broadcast(p.get(self.bias).data());
        y
    }

    pub fn backward(&self, p: &ParamSet, x: &Matrix, dy: &Matrix, g: &mut Grads) -> Matrix {
        gemm_into(1.0, x, true, dy, false, 1.0, g.get_mut(self.weight));
        let db = dy.column_sums();
        for (a, b) in g.get_mut(self.bias).data_mut().iter_mut().zip(&db) {
            *a += b;
        }
        Matrix::matmul(dy, false, p.get(self.weight), true)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

pub struct LayerNormCache {
    normed: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gain = params.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0));
        let shift = params.add(format!("{name}.shift"), Matrix::zeros(1, dim));
        Self { gain, shift }
    }

    pub fn forward(&self, p: &ParamSet, x: &Matrix) -> (Matrix, LayerNormCache) {
        let (n, d) = x.shape();
        let gain = p.get(self.gain).data();
        let shift = p.get(self.shift).data();
        let mut normed = Matrix::zeros(n, d);
        let mut y = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let nr = normed.row_mut(r);
            for (o, v) in nr.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            let yr = y.row_mut(r);
            for c in 0..d {
                yr[c] = normed.get(r, c) * gain[c] + shift[c];
            }
        }
        (y, LayerNormCache { normed, inv_std })
    }

    pub fn backward(&self, p: &ParamSet, cache: &LayerNormCache, dy: &Matrix, g: &mut Grads) -> Matrix {
        let (n, d) = dy.shape();
        let gain = p.get(self.gain).data().to_vec();
        {
            let dg = g.get_mut(self.gain).data_mut();
            for r in 0..n {
                for ((acc, &dyv), &nv) in dg.iter_mut().zip(dy.row(r)).zip(cache.normed.row(r)) {
                    *acc += dyv * nv;
                }
            }
        }
        {
            let ds = g.get_mut(self.shift).data_mut();
            for (a, b) in ds.iter_mut().zip(dy.column_sums()) {
                *a += b;
            }
        }
        let mut dx = Matrix::zeros(n, d);
        let df = d as f64;
        for r in 0..n {
            let xh = cache.normed.row(r);
            let dyr = dy.row(r);
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            for c in 0..d {
                let dxh = dyr[c] * gain[c];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[c];
            }
            let is = cache.inv_std[r];
            let out = dx.row_mut(r);
            for c in 0..d {
                let dxh = dyr[c] * gain[c];
                out[c] = is / df * (df * dxh - sum_dxh - xh[c] * sum_dxh_xh);
            }
        }
        dx
    }
}

/// Multi-head self-attention with a key-padding mask. Keys carry no bias:
/// a per-key constant shifts every score of a query equally and cancels in
/// the softmax.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    pub num_heads: usize,
    pub w_query: ParamId,
    pub b_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub b_value: ParamId,
    pub out: Linear,
}

pub struct AttentionCache {
    input: Matrix,
    query: Matrix,
    key: Matrix,
    value: Matrix,
    /// Per head: softmax probabilities before dropout.
    probs: Vec<Matrix>,
    drop_masks: Vec<Option<Vec<f64>>>,
    context: Matrix,
}

impl SelfAttention {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize, num_heads: usize, rng: &mut impl Rng) -> Self {
        let w_query = params.add_glorot(format!("{name}.query.weight"), dim, dim, rng);
        let b_query = params.add(format!("{name}.query.bias"), Matrix::zeros(1, dim));
        let w_key = params.add_glorot(format!("{name}.key.weight"), dim, dim, rng);
        let w_value = params.add_glorot(format!("{name}.value.weight"), dim, dim, rng);
        let b_value = params.add(format!("{name}.value.bias"), Matrix::zeros(1, dim));
        let out = Linear::new(params, &format!("{name}.out"), dim, dim, rng);
        Self {
            num_heads,
            w_query,
            b_query,
            w_key,
            w_value,
            b_value,
            out,
        }
    }

    pub fn forward(&self, p: &ParamSet, x: &Matrix, key_mask: &[bool], dropout: &mut Dropout) -> (Matrix, AttentionCache) {
        let (n, d) = x.shape();
        let dh = d / self.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut query = Matrix::matmul(x, false, p.get(self.w_query), false);
        query.add_row_broadcast(p.get(self.b_query).data());
        let key = Matrix::matmul(x, false, p.get(self.w_key), false);
        let mut value = Matrix::matmul(x, false, p.get(self.w_value), false);
        value.add_row_broadcast(p.get(self.b_value).data());

        let mut context = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(self.num_heads);
        let mut drop_masks = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = query.slice_cols(c0, c1);
            let kh = key.slice_cols(c0, c1);
            let vh = value.slice_cols(c0, c1);
            let mut scores = Matrix::zeros(n, n);
            gemm_into(scale, &qh, false, &kh, true, 0.0, &mut scores);
            masked_softmax_rows(&mut scores, key_mask);
            let mask = dropout.sample(n * n);
            let mut dropped = scores.clone();
            apply_mask(&mut dropped, &mask);
            let ctx_h = Matrix::matmul(&dropped, false, &vh, false);
            context.set_cols(c0, &ctx_h);
            probs.push(scores);
            drop_masks.push(mask);
        }
        let y = self.out.forward(p, &context);
        (
            y,
            AttentionCache {
                input: x.clone(),
                query,
                key,
                value,
                probs,
                drop_masks,
                context,
            },
        )
    }

    pub fn backward(&self, p: &ParamSet, cache: &AttentionCache, dy: &Matrix, g: &mut Grads) -> Matrix {
        let (n, d) = cache.input.shape();
        let dh = d / self.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dcontext = self.out.backward(p, &cache.context, dy, g);

        let mut dquery = Matrix::zeros(n, d);
        let mut dkey = Matrix::zeros(n, d);
        let mut dvalue = Matrix::zeros(n, d);
        for h in 0..self.num_heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = cache.query.slice_cols(c0, c1);
            let kh = cache.key.slice_cols(c0, c1);
            let vh = cache.value.slice_cols(c0, c1);
            let dctx = dcontext.slice_cols(c0, c1);
            let probs = &cache.probs[h];
            let mask = &cache.drop_masks[h];

            let mut dropped = probs.clone();
            apply_mask(&mut dropped, mask);
            let dvh = Matrix::matmul(&dropped, true, &dctx, false);
            let mut dprobs = Matrix::matmul(&dctx, false, &vh, true);
            apply_mask(&mut dprobs, mask);

            // softmax backward, row by row
            let mut dscores = Matrix::zeros(n, n);
            for r in 0..n {
                let pr = probs.row(r);
                let dpr = dprobs.row(r);
                let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                let out = dscores.row_mut(r);
                for c in 0..n {
                    out[c] = pr[c] * (dpr[c] - dot);
                }
            }
            let mut dqh = Matrix::zeros(n, dh);
            gemm_into(scale, &dscores, false, &kh, false, 0.0, &mut dqh);
            let mut dkh = Matrix::zeros(n, dh);
            gemm_into(scale, &dscores, true, &qh, false, 0.0, &mut dkh);
            dquery.set_cols(c0, &dqh);
            dkey.set_cols(c0, &dkh);
            dvalue.set_cols(c0, &dvh);
        }

        let x = &cache.input;
        gemm_into(1.0, x, true, &dquery, false, 1.0, g.get_mut(self.w_query));
        gemm_into(1.0, x, true, &dkey, false, 1.0, g.get_mut(self.w_key));
        gemm_into(1.0, x, true, &dvalue, false, 1.0, g.get_mut(self.w_value));
        for (a, b) in g.get_mut(self.b_query).data_mut().iter_mut().zip(dquery.column_sums()) {
            *a += b;
        }
        for (a, b) in g.get_mut(self.b_value).data_mut().iter_mut().zip(dvalue.column_sums()) {
            *a += b;
        }
        let mut dx = Matrix::zeros(n, d);
        gemm_into(1.0, &dquery, false, p.get(self.w_query), true, 0.0, &mut dx);
        gemm_into(1.0, &dkey, false, p.get(self.w_key), true, 1.0, &mut dx);
        gemm_into(1.0, &dvalue, false, p.get(self.w_value), true, 1.0, &mut dx);
        dx
    }
}

/// Row-wise softmax over the columns whose `key_mask` entry is true; masked
/// columns get probability zero.
fn masked_softmax_rows(scores: &mut Matrix, key_mask: &[bool]) {
    let cols = scores.cols();
    for r in 0..scores.rows() {
        let row = scores.row_mut(r);
        let mut max = f64::NEG_INFINITY;
        for c in 0..cols {
            if key_mask[c] && row[c] > max {
                max = row[c];
            }
        }
        let mut sum = 0.0;
        for c in 0..cols {
            if key_mask[c] {
                row[c] = (row[c] - max).exp();
                sum += row[c];
            } else {
                row[c] = 0.0;
            }
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        debug_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6, "attention row does not sum to 1");
    }
}

/// Pre-norm transformer layer: `x + MHA(LN(x))`, then `x + FF(LN(x))`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerLayer {
    pub norm_attn: LayerNorm,
    pub attn: SelfAttention,
    pub norm_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

pub struct TransformerLayerCache {
    norm_attn: LayerNormCache,
    attn: AttentionCache,
    norm_ff: LayerNormCache,
    norm_ff_out: Matrix,
    ff_pre: Matrix,
    ff_act: Matrix,
    ff_mask: Option<Vec<f64>>,
}

impl TransformerLayer {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize, heads: usize, ff_dim: usize, rng: &mut impl Rng) -> Self {
        let norm_attn = LayerNorm::new(params, &format!("{name}.norm_attn"), dim);
        let attn = SelfAttention::new(params, &format!("{name}.attn"), dim, heads, rng);
        let norm_ff = LayerNorm::new(params, &format!("{name}.norm_ff"), dim);
        let ff_in = Linear::new(params, &format!("{name}.ff_in"), dim, ff_dim, rng);
        let ff_out = Linear::new(params, &format!("{name}.ff_out"), ff_dim, dim, rng);
        Self {
            norm_attn,
            attn,
            norm_ff,
            ff_in,
            ff_out,
        }
    }

    pub fn forward(&self, p: &ParamSet, x: &Matrix, key_mask: &[bool], dropout: &mut Dropout) -> (Matrix, TransformerLayerCache) {
        let (h1, norm_attn) = self.norm_attn.forward(p, x);
        let (a, attn) = self.attn.forward(p, &h1, key_mask, dropout);
        let mut x1 = x.clone();
        x1.add_assign(&a);
        let (h2, norm_ff) = self.norm_ff.forward(p, &x1);
        let ff_pre = self.ff_in.forward(p, &h2);
        let mut ff_act = ff_pre.map(gelu);
        let ff_mask = dropout.sample(ff_act.len());
        apply_mask(&mut ff_act, &ff_mask);
        let f = self.ff_out.forward(p, &ff_act);
        x1.add_assign(&f);
        (
            x1,
            TransformerLayerCache {
                norm_attn,
                attn,
                norm_ff,
                norm_ff_out: h2,
                ff_pre,
                ff_act,
                ff_mask,
            },
        )
    }

    pub fn backward(&self, p: &ParamSet, cache: &TransformerLayerCache, dy: &Matrix, g: &mut Grads) -> Matrix {
        let mut dact = self.ff_out.backward(p, &cache.ff_act, dy, g);
        apply_mask(&mut dact, &cache.ff_mask);
        for (d, &pre) in dact.data_mut().iter_mut().zip(cache.ff_pre.data()) {
            *d *= gelu_grad(pre);
        }
        let dh2 = self.ff_in.backward(p, &cache.norm_ff_out, &dact, g);
        let mut dx1 = self.norm_ff.backward(p, &cache.norm_ff, &dh2, g);
        dx1.add_assign(dy);
        let dh1 = self.attn.backward(p, &cache.attn, &dx1, g);
        let mut dx = self.norm_attn.backward(p, &cache.norm_attn, &dh1, g);
        dx.add_assign(&dx1);
        dx
    }
}

/// Two-layer MLP head: `Linear -> GELU -> Linear`.
#[derive(Debug, Clone, Copy)]
pub struct MlpHead {
    pub hidden: Linear,
    pub out: Linear,
}

pub struct MlpCache {
    input: Matrix,
    pre: Matrix,
    act: Matrix,
}

impl MlpHead {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let hidden = Linear::new(params, &format!("{name}.hidden"), dim, dim, rng);
        let out = Linear::new(params, &format!("{name}.out"), dim, out_dim, rng);
        Self { hidden, out }
    }

    pub fn forward(&self, p: &ParamSet, x: &Matrix) -> (Matrix, MlpCache) {
        let pre = self.hidden.forward(p, x);
        let act = pre.map(gelu);
        let y = self.out.forward(p, &act);
        (
            y,
            MlpCache {
                input: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, p: &ParamSet, cache: &MlpCache, dy: &Matrix, g: &mut Grads) -> Matrix {
        let mut dact = self.out.backward(p, &cache.act, dy, g);
        for (d, &pre) in dact.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= gelu_grad(pre);
        }
        self.hidden.backward(p, &cache.input, &dact, g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn scalar_activation_derivatives() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            assert!((gelu_grad(x) - central(gelu, x)).abs() < 1e-8);
        }
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_ignores_masked_keys() {
        let mut s = Matrix::from_vec(2, 3, vec![1.0, 5.0, 2.0, 0.0, -1.0, 3.0]).unwrap();
        masked_softmax_rows(&mut s, &[true, false, true]);
        for r in 0..2 {
            assert_eq!(s.get(r, 1), 0.0);
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
