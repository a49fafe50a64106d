//! Adam with warmup plus inverse-square-root decay, the per-sample
//! objective and its gradient, and the epoch loop with validation,
//! metric logging and checkpointing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{build_lattice, label_anchors, AnchorConfig, AnchorSet, DEFAULT_POSITIVE_THRESHOLD};
use crate::data::{make_batches, Batch, QueryAnnotation, Sample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, MetricReport};
use crate::inference::{decode_anchor_spans, decode_frame_spans, predict_samples, DecodedSpan, PredictOptions, PredictionMode};
use crate::losses::{
    alignment_loss, alignment_loss_grad, boundary_loss, boundary_loss_grad, total_loss, BoxUnits, LossBreakdown,
    DEFAULT_BETA, DEFAULT_MU,
};
use crate::nn::{save_checkpoint, EncoderConfig, ForwardMode, Grads, GroundingModel, Matrix, ModelOutput, OutputGrads, ParamSet};
use crate::span::{interval_iou, TimeSpan, Units};

pub const BEST_CHECKPOINT: &str = "best.nlqc";
pub const LAST_CHECKPOINT: &str = "last.nlqc";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const STEPS_LOG: &str = "steps.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub mu: f64,
    pub positive_threshold: f64,
    /// Global gradient-norm cap; zero disables clipping.
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub smooth_l1_beta: f64,
    pub box_units: BoxUnits,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            base_lr: 2e-4,
            warmup_steps: 1000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            mu: DEFAULT_MU,
            positive_threshold: DEFAULT_POSITIVE_THRESHOLD,
            grad_clip_norm: 1.0,
            seed: 0,
            smooth_l1_beta: DEFAULT_BETA,
            box_units: BoxUnits::Normalized,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad("mu must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.positive_threshold) {
            return bad("positive_threshold must lie in [0, 1)");
        }
        if !(self.grad_clip_norm >= 0.0) {
            return bad("grad_clip_norm must be nonnegative");
        }
        if !(self.smooth_l1_beta > 0.0) {
            return bad("smooth_l1_beta must be positive");
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` at `warmup_steps`, then `base_lr·sqrt(warmup/step)`.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    let step = step.max(1) as f64;
    let warmup = config.warmup_steps as f64;
    if step <= warmup {
        config.base_lr * step / warmup
    } else {
        config.base_lr * (warmup / step).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Grads,
    pub v: Grads,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step_count: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamStats {
    /// Norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One bias-corrected Adam update after global-norm clipping.
pub fn adam_step(params: &mut ParamSet, grads: &Grads, state: &mut OptimizerState, lr: f64, config: &TrainConfig) -> Result<AdamStats> {
    let step = state.step_count + 1;
    if grads.blocks().len() != params.len() || grads.blocks().iter().zip(params.iter()).any(|(g, p)| g.shape() != p.value.shape()) {
        return Err(Error::Shape("gradient layout does not match parameters".into()));
    }
    if !grads.is_finite() {
        return Err(Error::Divergence {
            step,
            message: "non-finite gradient".into(),
        });
    }
    let grad_norm = grads.global_norm();
    let clipped = config.grad_clip_norm > 0.0 && grad_norm > config.grad_clip_norm;
    let scale = if clipped { config.grad_clip_norm / grad_norm } else { 1.0 };
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powf(step as f64);
    let c2 = 1.0 - b2.powf(step as f64);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads.blocks())
        .zip(state.m.blocks_mut())
        .zip(state.v.blocks_mut())
    {
        for (((x, &g), m), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = g * scale;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + config.adam_eps);
        }
    }
    state.step_count = step;
    Ok(AdamStats { grad_norm, clipped })
}

/// Loss settings shared by every sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub mu: f64,
    pub positive_threshold: f64,
    pub beta: f64,
    pub box_units: BoxUnits,
}

impl From<&TrainConfig> for Objective {
    fn from(c: &TrainConfig) -> Self {
        Self {
            mu: c.mu,
            positive_threshold: c.positive_threshold,
            beta: c.smooth_l1_beta,
            box_units: c.box_units,
        }
    }
}

/// What the heads are trained against: an anchor lattice, or one proposal per frame.
#[derive(Debug, Clone)]
pub enum Targets {
    Anchors(AnchorSet),
    Frames,
}

impl Targets {
    pub fn new(mode: PredictionMode, anchors: &AnchorConfig) -> Result<Self> {
        Ok(match mode {
            PredictionMode::Anchor => Targets::Anchors(build_lattice(anchors)?),
            PredictionMode::AnchorFree => Targets::Frames,
        })
    }

    pub fn num_scales(&self) -> usize {
        match self {
            Targets::Anchors(a) => a.num_scales(),
            Targets::Frames => 1,
        }
    }
}

fn index_spans(decoded: &[DecodedSpan]) -> Vec<TimeSpan> {
    decoded.iter().map(|d| TimeSpan::raw(d.start, d.end, Units::Index)).collect()
}

/// Frames whose center lies inside `gt`; the frame holding the center of
/// `gt` when none does.
fn frame_positives(num_frames: usize, gt: &TimeSpan) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..num_frames)
        .map(|t| {
            let c = t as f64 + 0.5;
            gt.start <= c && c <= gt.end
        })
        .collect();
    if !mask.contains(&true) {
        let t = (gt.center().floor().max(0.0) as usize).min(num_frames - 1);
        mask[t] = true;
    }
    mask
}

/// Loss of one sample's head outputs and its gradient with respect to them.
pub fn head_objective(output: &ModelOutput, targets: &Targets, gt: &TimeSpan, obj: &Objective) -> Result<(LossBreakdown, OutputGrads)> {
    let t_len = output.confidence.rows();
    let k_len = targets.num_scales();
    if output.confidence.shape() != (t_len, k_len) || output.offsets.shape() != (t_len, 2 * k_len) {
        return Err(Error::Shape(format!(
            "head outputs {:?} / {:?} do not match {k_len} scales",
            output.confidence.shape(),
            output.offsets.shape()
        )));
    }
    let (decoded, iou_targets, positives) = match targets {
        Targets::Anchors(anchors) => {
            if anchors.num_frames() != t_len {
                return Err(Error::Shape(format!("{t_len} frames vs a lattice of {}", anchors.num_frames())));
            }
            let mut labels = label_anchors(anchors, gt, obj.positive_threshold)?;
            labels.ensure_positive();
            (decode_anchor_spans(&output.offsets, anchors), labels.iou_targets, labels.positive_mask)
        }
        Targets::Frames => {
            let decoded = decode_frame_spans(&output.offsets);
            let positives = frame_positives(t_len, gt);
            // targets follow the current prediction and are not differentiated
            let iou_targets = decoded
                .iter()
                .zip(&positives)
                .map(|(d, &p)| if p { interval_iou(d.start, d.end, gt.start, gt.end) } else { 0.0 })
                .collect();
            (decoded, iou_targets, positives)
        }
    };
    let confidences = output.confidence.data();
    let spans = index_spans(&decoded);
    let norm = obj.box_units.norm(t_len);
    let align = alignment_loss(&iou_targets, confidences)?;
    let box_ = boundary_loss(&spans, gt, &positives, obj.beta, norm)?;
    let num_positives = positives.iter().filter(|&&p| p).count();

    let d_conf = alignment_loss_grad(&iou_targets, confidences)?;
    let d_box = boundary_loss_grad(&spans, gt, &positives, obj.beta, norm)?;
    let mut d_offsets = Matrix::zeros(t_len, 2 * k_len);
    for (i, (d, (gs, ge))) in decoded.iter().zip(d_box).enumerate() {
        if gs == 0.0 && ge == 0.0 {
            continue;
        }
        let (t, k) = (i / k_len, i % k_len);
        let row = d_offsets.row_mut(t);
        for j in 0..2 {
            row[2 * k + j] += obj.mu * (gs * d.d_start[j] + ge * d.d_end[j]);
        }
    }
    let grads = OutputGrads {
        confidence: Matrix::from_vec(t_len, k_len, d_conf)?,
        offsets: d_offsets,
        fused: None,
    };
    Ok((total_loss(align, box_, obj.mu).with_positives(num_positives), grads))
}

/// Full-model loss and parameter gradient for one query.
#[allow(clippy::too_many_arguments)]
pub fn sample_objective(
    model: &GroundingModel,
    targets: &Targets,
    video: &Matrix,
    text: &Matrix,
    text_mask: &[bool],
    gt: &TimeSpan,
    obj: &Objective,
    mode: ForwardMode,
) -> Result<(LossBreakdown, Grads)> {
    let video_mask = vec![true; video.rows()];
    let (output, cache) = model.forward(video, &video_mask, text, text_mask, mode)?;
    let (loss, upstream) = head_objective(&output, targets, gt, obj)?;
    Ok((loss, model.backward(&cache, &upstream)?.params))
}

/// Full-model loss only, for finite-difference checks.
pub fn sample_loss(model: &GroundingModel, targets: &Targets, video: &Matrix, text: &Matrix, gt: &TimeSpan, obj: &Objective) -> Result<f64> {
    let video_mask = vec![true; video.rows()];
    let text_mask = vec![true; text.rows()];
    let output = model.infer(video, &video_mask, text, &text_mask)?;
    Ok(head_objective(&output, targets, gt, obj)?.0.total)
}

/// SplitMix64 finalizer; decorrelates per-item dropout seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub loss_align: f64,
    pub loss_box: f64,
    pub grad_norm: f64,
}

/// Model plus optimizer state; advances one batch at a time.
pub struct Trainer {
    pub model: GroundingModel,
    pub targets: Targets,
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
}

impl Trainer {
    pub fn new(model: GroundingModel, targets: Targets, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.num_scales() != targets.num_scales() {
            return Err(Error::InvalidArgument(format!(
                "model predicts {} scales, targets need {}",
                model.num_scales(),
                targets.num_scales()
            )));
        }
        let optimizer = OptimizerState::new(&model.params);
        Ok(Self {
            model,
            targets,
            config,
            optimizer,
        })
    }

    /// Mean loss and gradient over a batch. Items run in parallel and are
    /// summed in batch order, so the result does not depend on scheduling.
    pub fn batch_gradient(&self, samples: &[Sample], batch: &Batch, step: u64) -> Result<(LossBreakdown, Grads)> {
        let obj = Objective::from(&self.config);
        let per_item: Vec<(LossBreakdown, Grads)> = batch
            .items
            .par_iter()
            .enumerate()
            .map(|(i, item)| {
                let s = &samples[item.sample];
                let seed = mix(self.config.seed ^ mix(step) ^ mix(i as u64).rotate_left(17));
                sample_objective(
                    &self.model,
                    &self.targets,
                    &s.video,
                    &item.text,
                    &item.text_mask,
                    &s.gt_index,
                    &obj,
                    ForwardMode::Train { seed },
                )
            })
            .collect::<Result<_>>()?;
        let n = per_item.len() as f64;
        let mut grads = self.model.params.zeros_like();
        let (mut align, mut box_, mut positives) = (0.0, 0.0, 0);
        for (loss, g) in &per_item {
            grads.add_assign(g);
            align += loss.align;
            box_ += loss.box_;
            positives += loss.num_positives;
        }
        grads.scale(1.0 / n);
        Ok((total_loss(align / n, box_ / n, obj.mu).with_positives(positives), grads))
    }

    /// Gradient, Adam update at the scheduled rate, then parameters rounded to f32.
    pub fn step(&mut self, samples: &[Sample], batch: &Batch, epoch: u64) -> Result<StepRecord> {
        let step = self.optimizer.step_count + 1;
        let (loss, grads) = self.batch_gradient(samples, batch, step)?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                step,
                message: format!("loss is {}", loss.total),
            });
        }
        let lr = lr_at(step, &self.config);
        let stats = adam_step(&mut self.model.params, &grads, &mut self.optimizer, lr, &self.config)?;
        self.model.params.round_to_f32();
        Ok(StepRecord {
            step,
            epoch,
            lr,
            loss: loss.total,
            loss_align: loss.align,
            loss_box: loss.box_,
            grad_norm: stats.grad_norm,
        })
    }
}

/// Extra header fields stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub anchors: AnchorConfig,
    pub prediction_mode: PredictionMode,
    pub epoch: usize,
    #[serde(default)]
    pub val_r1_iou05: Option<f64>,
}

impl CheckpointMeta {
    pub fn from_value(value: &serde_json::Value) -> Result<Self> {
        serde_json::from_value(value.clone()).map_err(|e| Error::Format {
            id: "checkpoint".into(),
            message: format!("metadata: {e}"),
        })
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_align: f64,
    pub loss_box: f64,
    pub report: MetricReport,
}

impl EpochRecord {
    fn recall(&self, n: usize, m: f64) -> f64 {
        self.report.recall(n, m).unwrap_or(0.0)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "epoch": self.epoch,
            "loss_align": self.loss_align,
            "loss_box": self.loss_box,
            "R1@0.3": self.recall(1, 0.3),
            "R1@0.5": self.recall(1, 0.5),
            "R5@0.3": self.recall(5, 0.3),
            "R5@0.5": self.recall(5, 0.5),
        })
    }
}

pub struct TrainOutcome {
    pub model: GroundingModel,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

fn annotations_of(samples: &[Sample]) -> Vec<QueryAnnotation> {
    samples
        .iter()
        .map(|s| QueryAnnotation {
            video_id: s.video_id.clone(),
            query_id: s.query_id.clone(),
            text: String::new(),
            start_sec: s.gt_sec.start,
            end_sec: s.gt_sec.end,
            duration_sec: s.grid.duration_sec,
        })
        .collect()
}

/// Recall report at ranks 1/5 and IoU 0.3/0.5 of a model on prepared samples.
pub fn validate_model(model: &GroundingModel, anchors: &AnchorConfig, opts: &PredictOptions, samples: &[Sample]) -> Result<MetricReport> {
    let lattice = build_lattice(anchors)?;
    let preds = predict_samples(model, &lattice, samples, opts)?;
    evaluate(&preds, &annotations_of(samples), &EvalOptions::default())
}

fn append_line(file: &mut fs::File, path: &Path, value: &impl Serialize) -> Result<()> {
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    file.write_all(&line).map_err(|e| Error::io(path, e))
}

/// Runs the full schedule. `encoder` input widths of zero are taken from the
/// data, and its scale count from the prediction mode. Validation ranks
/// proposals with `predict`.
pub fn train(
    train_samples: &[Sample],
    val_samples: &[Sample],
    encoder: &EncoderConfig,
    config: &TrainConfig,
    anchors: &AnchorConfig,
    predict: &PredictOptions,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    anchors.validate()?;
    predict.validate()?;
    let mode = predict.mode;
    let first = train_samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("training set is empty".into()))?;
    if val_samples.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    for s in train_samples.iter().chain(val_samples) {
        if s.video.rows() != anchors.num_frames {
            return Err(Error::InvalidArgument(format!(
                "query `{}` has {} frames, anchors expect {}",
                s.query_id,
                s.video.rows(),
                anchors.num_frames
            )));
        }
    }
    let targets = Targets::new(mode, anchors)?;
    let mut encoder = encoder.clone();
    if encoder.video_input_dim == 0 {
        encoder.video_input_dim = first.video.cols();
    }
    if encoder.text_input_dim == 0 {
        encoder.text_input_dim = first.text.cols();
    }
    encoder.num_scales = targets.num_scales();
    let mut model = GroundingModel::init(&encoder, config.seed)?;
    model.params.round_to_f32();
    let mut trainer = Trainer::new(model, targets, config.clone())?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let open = |name: &str| -> Result<(fs::File, PathBuf)> {
        let path = out_dir.join(name);
        Ok((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
    };
    let (mut steps_log, steps_path) = open(STEPS_LOG)?;
    let (mut metrics_log, metrics_path) = open(METRICS_LOG)?;
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64)> = None;
    for epoch in 1..=config.epochs {
        let batches = make_batches(train_samples, config.batch_size, config.seed, epoch as u64)?;
        let (mut align, mut box_) = (0.0, 0.0);
        for batch in &batches {
            let rec = trainer.step(train_samples, batch, epoch as u64)?;
            append_line(&mut steps_log, &steps_path, &rec)?;
            align += rec.loss_align;
            box_ += rec.loss_box;
        }
        let report = validate_model(&trainer.model, anchors, predict, val_samples)?;
        let record = EpochRecord {
            epoch,
            loss_align: align / batches.len() as f64,
            loss_box: box_ / batches.len() as f64,
            report,
        };
        append_line(&mut metrics_log, &metrics_path, &record.to_json())?;
        let score = record.recall(1, 0.5);
        log::info!(
            "epoch {epoch}: align {:.4} box {:.5} val R1@0.5 {:.3} R5@0.5 {:.3}",
            record.loss_align,
            record.loss_box,
            score,
            record.recall(5, 0.5)
        );
        let meta = CheckpointMeta {
            anchors: anchors.clone(),
            prediction_mode: mode,
            epoch,
            val_r1_iou05: Some(score),
        };
        let meta = serde_json::to_value(&meta)?;
        save_checkpoint(&last_path, &trainer.model, &meta)?;
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((epoch, score));
            save_checkpoint(&best_path, &trainer.model, &meta)?;
        }
        epochs.push(record);
    }
    Ok(TrainOutcome {
        model: trainer.model,
        epochs,
        best_epoch: best.map(|b| b.0).unwrap_or(0),
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn schedule_values() {
        let c = cfg();
        assert!((lr_at(500, &c) - 1e-4).abs() < 1e-18);
        assert_eq!(lr_at(1000, &c), 2e-4);
        assert!((lr_at(4000, &c) - 1e-4).abs() < 1e-18);
        assert!(lr_at(1001, &c) < lr_at(1000, &c));
        // continuity on both sides of the warmup boundary
        assert!((lr_at(999, &c) - lr_at(1000, &c)).abs() < 1e-6);
        assert!((lr_at(1001, &c) - lr_at(1000, &c)).abs() < 1e-6);
    }

    fn scalar(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("theta", Matrix::filled(1, 1, v));
        ps
    }

    fn grad_of(ps: &ParamSet, g: f64) -> Grads {
        let mut grads = ps.zeros_like();
        grads.blocks_mut()[0].data_mut()[0] = g;
        grads
    }

    #[test]
    fn first_adam_step_closed_form() {
        let c = TrainConfig {
            grad_clip_norm: 0.0,
            ..cfg()
        };
        let mut ps = scalar(0.0);
        let mut st = OptimizerState::new(&ps);
        let g = grad_of(&ps, 1.0);
        adam_step(&mut ps, &g, &mut st, 1e-3, &c).unwrap();
        let expect = -1e-3 / (1.0 + 1e-8);
        assert!((ps.block(0).value.get(0, 0) - expect).abs() < 1e-18);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut ps = scalar(0.7);
        let mut st = OptimizerState::new(&ps);
        st.m.blocks_mut()[0].data_mut()[0] = 0.5;
        st.v.blocks_mut()[0].data_mut()[0] = 0.25;
        let zero = ps.zeros_like();
        for _ in 0..3 {
            let before = st.m.blocks()[0].get(0, 0);
            // moments decay, parameter moves only by the decaying momentum
            adam_step(&mut ps, &zero, &mut st, 1e-3, &cfg()).unwrap();
            assert!(st.m.blocks()[0].get(0, 0).abs() < before.abs());
        }
        let mut fresh = scalar(0.7);
        let mut st = OptimizerState::new(&fresh);
        for _ in 0..5 {
            adam_step(&mut fresh, &zero, &mut st, 1e-3, &cfg()).unwrap();
        }
        assert_eq!(fresh.block(0).value.get(0, 0), 0.7);
    }

    #[test]
    fn clipped_update_is_scale_invariant() {
        let run = |g: f64| {
            let mut ps = scalar(0.0);
            let mut st = OptimizerState::new(&ps);
            let grads = grad_of(&ps, g);
            adam_step(&mut ps, &grads, &mut st, 1e-2, &cfg()).unwrap();
            let grads = grad_of(&ps, -0.5 * g);
            adam_step(&mut ps, &grads, &mut st, 1e-2, &cfg()).unwrap();
            ps.block(0).value.get(0, 0)
        };
        assert_eq!(run(3.0), run(12.0));
    }

    #[test]
    fn nan_gradient_diverges() {
        let mut ps = scalar(0.0);
        let mut st = OptimizerState::new(&ps);
        let g = grad_of(&ps, f64::NAN);
        assert!(matches!(
            adam_step(&mut ps, &g, &mut st, 1e-3, &cfg()),
            Err(Error::Divergence { step: 1, .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..cfg() },
            TrainConfig { batch_size: 0, ..cfg() },
            TrainConfig { base_lr: 0.0, ..cfg() },
            TrainConfig { warmup_steps: 0, ..cfg() },
        ] {
            assert!(bad.validate().is_err());
        }
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(parsed.batch_size, 32);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn frame_positive_rule() {
        let gt = TimeSpan::raw(2.2, 4.6, Units::Index);
        assert_eq!(frame_positives(8, &gt), vec![false, false, true, true, true, false, false, false]);
        let tiny = TimeSpan::raw(5.6, 5.9, Units::Index);
        assert_eq!(frame_positives(8, &tiny).iter().position(|&p| p), Some(5));
    }

    fn head_output(t: usize, k: usize, seed: u64) -> ModelOutput {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r, c, lo: f64, hi: f64| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
        };
        ModelOutput {
            confidence: m(t, k, 0.05, 0.95),
            offsets: m(t, 2 * k, -0.4, 0.4),
            fused: Matrix::zeros(t, 1),
        }
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let anchors = build_lattice(&AnchorConfig::new(vec![0.25, 0.5], 8).unwrap()).unwrap();
        let targets = Targets::Anchors(anchors);
        let gt = TimeSpan::raw(1.7, 5.2, Units::Index);
        let obj = Objective::from(&TrainConfig { mu: 2.0, ..cfg() });
        let out = head_output(8, 2, 1);
        let (_, g) = head_objective(&out, &targets, &gt, &obj).unwrap();
        let h = 1e-6;
        for which in 0..2 {
            let base = if which == 0 { &out.confidence } else { &out.offsets };
            for i in 0..base.len() {
                let eval = |delta: f64| {
                    let mut o = out.clone();
                    let m = if which == 0 { &mut o.confidence } else { &mut o.offsets };
                    m.data_mut()[i] += delta;
                    head_objective(&o, &targets, &gt, &obj).unwrap().0.total
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let analytic = if which == 0 { g.confidence.data()[i] } else { g.offsets.data()[i] };
                assert!((numeric - analytic).abs() < 1e-6, "{which}/{i}: {numeric} vs {analytic}");
            }
        }
    }

    #[test]
    fn frame_targets_shapes() {
        let out = head_output(10, 1, 3);
        let gt = TimeSpan::raw(2.0, 6.0, Units::Index);
        let (loss, g) = head_objective(&out, &Targets::Frames, &gt, &Objective::from(&cfg())).unwrap();
        assert_eq!(loss.num_positives, 4);
        assert_eq!(g.offsets.shape(), (10, 2));
        assert!(loss.total.is_finite());
        // offsets of negative frames get no boundary gradient
        assert!(g.offsets.row(0).iter().all(|&x| x == 0.0));
    }
}
