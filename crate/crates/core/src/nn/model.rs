//! The grounding network: per-modality input projections and encoders, a
//! joint single-stream encoder over `[video; text]`, and the confidence and
//! regression heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{sigmoid, Dropout, LayerNorm, LayerNormCache, Linear, MlpCache, MlpHead, TransformerLayer, TransformerLayerCache};
use super::matrix::Matrix;
use super::params::{Grads, ParamId, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    #[serde(default = "default_intra")]
    pub intra_layers: usize,
    #[serde(default = "default_cross")]
    pub cross_layers: usize,
    /// Zero means "take it from the data".
    #[serde(default)]
    pub video_input_dim: usize,
    /// Zero means "take it from the data".
    #[serde(default)]
    pub text_input_dim: usize,
    #[serde(default = "default_scales")]
    pub num_scales: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    /// Defaults to `4 * hidden_dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedforward_dim: Option<usize>,
}

fn default_hidden() -> usize {
    512
}
fn default_heads() -> usize {
    4
}
fn default_intra() -> usize {
    1
}
fn default_cross() -> usize {
    5
}
fn default_scales() -> usize {
    2
}
fn default_dropout() -> f64 {
    0.1
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: default_hidden(),
            num_heads: default_heads(),
            intra_layers: default_intra(),
            cross_layers: default_cross(),
            video_input_dim: 0,
            text_input_dim: 0,
            num_scales: default_scales(),
            dropout_rate: default_dropout(),
            feedforward_dim: None,
        }
    }
}

impl EncoderConfig {
    pub fn new(video_input_dim: usize, text_input_dim: usize, num_scales: usize) -> Self {
        Self {
            video_input_dim,
            text_input_dim,
            num_scales,
            ..Self::default()
        }
    }

    pub fn ff_dim(&self) -> usize {
        self.feedforward_dim.unwrap_or(4 * self.hidden_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("intra_layers", self.intra_layers),
            ("cross_layers", self.cross_layers),
            ("video_input_dim", self.video_input_dim),
            ("text_input_dim", self.text_input_dim),
            ("num_scales", self.num_scales),
            ("feedforward_dim", self.ff_dim()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidArgument(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !self.hidden_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument("hidden_dim must be even for sinusoidal positions".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Fixed sinusoidal table: `(p, 2i) = sin(p / 10000^(2i/dim))`, `(p, 2i+1) = cos(..)`.
pub fn sinusoidal_positions(length: usize, dim: usize) -> Result<Matrix> {
    if !dim.is_multiple_of(2) || dim == 0 {
        return Err(Error::InvalidArgument(format!("positional dim must be even, got {dim}")));
    }
    let mut m = Matrix::zeros(length, dim);
    for p in 0..length {
        let row = m.row_mut(p);
        for i in 0..dim / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            row[2 * i] = angle.sin();
            row[2 * i + 1] = angle.cos();
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    video_proj: Linear,
    text_proj: Linear,
    type_embed: ParamId,
    final_norm: LayerNorm,
    confidence_head: MlpHead,
    regression_head: MlpHead,
}

#[derive(Debug, Clone)]
pub struct GroundingModel {
    pub config: EncoderConfig,
    pub seed: u64,
    pub params: ParamSet,
    layout: Layout,
    intra_video: Vec<TransformerLayer>,
    intra_text: Vec<TransformerLayer>,
    cross: Vec<TransformerLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// `T x K`, sigmoid probabilities.
    pub confidence: Matrix,
    /// `T x 2K`, raw regression values `(start, end)` per scale.
    pub offsets: Matrix,
    /// `T x hidden`, video rows after the joint encoder.
    pub fused: Matrix,
}

/// Upstream gradients with respect to a [`ModelOutput`].
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub confidence: Matrix,
    pub offsets: Matrix,
    pub fused: Option<Matrix>,
}

#[derive(Debug, Clone, Copy)]
pub enum ForwardMode {
    Eval,
    /// Dropout active, masks drawn from a generator seeded with `seed`.
    Train { seed: u64 },
}

pub struct ForwardCache {
    num_blocks: usize,
    video_len: usize,
    text_len: usize,
    video_in: Matrix,
    text_in: Matrix,
    intra_video: Vec<TransformerLayerCache>,
    intra_text: Vec<TransformerLayerCache>,
    cross: Vec<TransformerLayerCache>,
    final_norm: LayerNormCache,
    conf_head: MlpCache,
    reg_head: MlpCache,
    confidence: Matrix,
}

pub struct BackwardOutput {
    pub params: Grads,
    pub video: Matrix,
    pub text: Matrix,
}

impl GroundingModel {
    /// Builds a freshly initialized model; identical `(config, seed)` give identical weights.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let h = config.hidden_dim;
        let ff = config.ff_dim();
        let heads = config.num_heads;
        let k = config.num_scales;

        let video_proj = Linear::new(&mut params, "video_proj", config.video_input_dim, h, &mut rng);
        let text_proj = Linear::new(&mut params, "text_proj", config.text_input_dim, h, &mut rng);
        let intra_video = (0..config.intra_layers)
            .map(|i| TransformerLayer::new(&mut params, &format!("intra_video.{i}"), h, heads, ff, &mut rng))
            .collect();
        let intra_text = (0..config.intra_layers)
            .map(|i| TransformerLayer::new(&mut params, &format!("intra_text.{i}"), h, heads, ff, &mut rng))
            .collect();
        let type_embed = params.add_glorot("type_embed", 2, h, &mut rng);
        let cross = (0..config.cross_layers)
            .map(|i| TransformerLayer::new(&mut params, &format!("cross.{i}"), h, heads, ff, &mut rng))
            .collect();
        let final_norm = LayerNorm::new(&mut params, "cross.final_norm", h);
        let confidence_head = MlpHead::new(&mut params, "confidence_head", h, k, &mut rng);
        let regression_head = MlpHead::new(&mut params, "regression_head", h, 2 * k, &mut rng);

        Ok(Self {
            config: config.clone(),
            seed,
            params,
            layout: Layout {
                video_proj,
                text_proj,
                type_embed,
                final_norm,
                confidence_head,
                regression_head,
            },
            intra_video,
            intra_text,
            cross,
        })
    }

    pub fn num_scales(&self) -> usize {
        self.config.num_scales
    }

    /// Eval-mode forward pass.
    pub fn infer(&self, video: &Matrix, video_mask: &[bool], text: &Matrix, text_mask: &[bool]) -> Result<ModelOutput> {
        Ok(self.forward(video, video_mask, text, text_mask, ForwardMode::Eval)?.0)
    }

    pub fn forward(
        &self,
        video: &Matrix,
        video_mask: &[bool],
        text: &Matrix,
        text_mask: &[bool],
        mode: ForwardMode,
    ) -> Result<(ModelOutput, ForwardCache)> {
        self.check_inputs(video, video_mask, text, text_mask)?;
        let p = &self.params;
        let l = &self.layout;
        let t_len = video.rows();
        let l_len = text.rows();
        let h = self.config.hidden_dim;
        let mut dropout = match mode {
            ForwardMode::Eval => Dropout::eval(),
            ForwardMode::Train { seed } => Dropout::train(self.config.dropout_rate, ChaCha8Rng::seed_from_u64(seed)),
        };

        let video_pos = sinusoidal_positions(t_len, h)?;
        let text_pos = sinusoidal_positions(l_len, h)?;

        let mut v = l.video_proj.forward(p, video);
        v.add_assign(&video_pos);
        let mut intra_video = Vec::with_capacity(self.intra_video.len());
        for layer in &self.intra_video {
            let (out, cache) = layer.forward(p, &v, video_mask, &mut dropout);
            v = out;
            intra_video.push(cache);
        }

        let mut t = l.text_proj.forward(p, text);
        t.add_assign(&text_pos);
        let mut intra_text = Vec::with_capacity(self.intra_text.len());
        for layer in &self.intra_text {
            let (out, cache) = layer.forward(p, &t, text_mask, &mut dropout);
            t = out;
            intra_text.push(cache);
        }

        let types = p.get(l.type_embed);
        v.add_assign(&video_pos);
        v.add_row_broadcast(types.row(0));
        t.add_assign(&text_pos);
        t.add_row_broadcast(types.row(1));

        let mut x = Matrix::vstack(&v, &t);
        let joint_mask: Vec<bool> = video_mask.iter().chain(text_mask).copied().collect();
        let mut cross = Vec::with_capacity(self.cross.len());
        for layer in &self.cross {
            let (out, cache) = layer.forward(p, &x, &joint_mask, &mut dropout);
            x = out;
            cross.push(cache);
        }
        let (normed, final_norm) = l.final_norm.forward(p, &x);
        let fused = normed.slice_rows(0, t_len);

        let (logits, conf_head) = l.confidence_head.forward(p, &fused);
        let confidence = logits.map(sigmoid);
        let (offsets, reg_head) = l.regression_head.forward(p, &fused);

        let output = ModelOutput {
            confidence: confidence.clone(),
            offsets,
            fused,
        };
        if !(output.confidence.is_finite() && output.offsets.is_finite()) {
            return Err(Error::InvalidState("non-finite model output".into()));
        }
        let cache = ForwardCache {
            num_blocks: p.len(),
            video_len: t_len,
            text_len: l_len,
            video_in: video.clone(),
            text_in: text.clone(),
            intra_video,
            intra_text,
            cross,
            final_norm,
            conf_head,
            reg_head,
            confidence,
        };
        Ok((output, cache))
    }

    /// Reverse-mode pass for a cached forward. Parameter gradients are
    /// returned fresh (not accumulated across calls).
    pub fn backward(&self, cache: &ForwardCache, upstream: &OutputGrads) -> Result<BackwardOutput> {
        let k = self.config.num_scales;
        let h = self.config.hidden_dim;
        let t_len = cache.video_len;
        if cache.num_blocks != self.params.len()
            || cache.intra_video.len() != self.intra_video.len()
            || cache.cross.len() != self.cross.len()
        {
            return Err(Error::InvalidState("forward cache was produced by a different model".into()));
        }
        if upstream.confidence.shape() != (t_len, k) || upstream.offsets.shape() != (t_len, 2 * k) {
            return Err(Error::InvalidState(format!(
                "upstream gradient shapes {:?}/{:?} do not match cached forward (T={t_len}, K={k})",
                upstream.confidence.shape(),
                upstream.offsets.shape()
            )));
        }
        if let Some(f) = &upstream.fused {
            if f.shape() != (t_len, h) {
                return Err(Error::InvalidState("fused gradient shape mismatch".into()));
            }
        }

        let p = &self.params;
        let l = &self.layout;
        let mut g = p.zeros_like();

        let mut dlogits = upstream.confidence.clone();
        for (d, &s) in dlogits.data_mut().iter_mut().zip(cache.confidence.data()) {
            *d *= s * (1.0 - s);
        }
        let mut dfused = l.confidence_head.backward(p, &cache.conf_head, &dlogits, &mut g);
        dfused.add_assign(&l.regression_head.backward(p, &cache.reg_head, &upstream.offsets, &mut g));
        if let Some(f) = &upstream.fused {
            dfused.add_assign(f);
        }

        let mut dnormed = Matrix::zeros(t_len + cache.text_len, h);
        for r in 0..t_len {
            dnormed.row_mut(r).copy_from_slice(dfused.row(r));
        }
        let mut dx = l.final_norm.backward(p, &cache.final_norm, &dnormed, &mut g);
        for (layer, c) in self.cross.iter().zip(&cache.cross).rev() {
            dx = layer.backward(p, c, &dx, &mut g);
        }

        let mut dv = dx.slice_rows(0, t_len);
        let mut dt = dx.slice_rows(t_len, t_len + cache.text_len);
        {
            let dtype = g.get_mut(l.type_embed);
            let sv = dv.column_sums();
            let st = dt.column_sums();
            for c in 0..h {
                dtype.data_mut()[c] += sv[c];
                dtype.data_mut()[h + c] += st[c];
            }
        }
        for (layer, c) in self.intra_video.iter().zip(&cache.intra_video).rev() {
            dv = layer.backward(p, c, &dv, &mut g);
        }
        for (layer, c) in self.intra_text.iter().zip(&cache.intra_text).rev() {
            dt = layer.backward(p, c, &dt, &mut g);
        }
        let dvideo = l.video_proj.backward(p, &cache.video_in, &dv, &mut g);
        let dtext = l.text_proj.backward(p, &cache.text_in, &dt, &mut g);
        Ok(BackwardOutput {
            params: g,
            video: dvideo,
            text: dtext,
        })
    }

    fn check_inputs(&self, video: &Matrix, video_mask: &[bool], text: &Matrix, text_mask: &[bool]) -> Result<()> {
        let c = &self.config;
        if video.cols() != c.video_input_dim || text.cols() != c.text_input_dim {
            return Err(Error::Shape(format!(
                "inputs {}x{} / {}x{} do not match configured dims {} / {}",
                video.rows(),
                video.cols(),
                text.rows(),
                text.cols(),
                c.video_input_dim,
                c.text_input_dim
            )));
        }
        if video_mask.len() != video.rows() || text_mask.len() != text.rows() {
            return Err(Error::Shape("mask length does not match sequence length".into()));
        }
        if !video_mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument("every video position is masked".into()));
        }
        if !text_mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument("every text position is masked".into()));
        }
        if !(video.is_finite() && text.is_finite()) {
            return Err(Error::InvalidArgument("non-finite input features".into()));
        }
        Ok(())
    }
}
