//! Proposal decoding, suppression, top-k selection and score fusion.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::layers::{sigmoid, softplus};
use crate::nn::{GroundingModel, Matrix, ModelOutput};
use crate::span::{index_to_sec, interval_iou, FrameGrid, TimeSpan, Units};

pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    #[default]
    #[value(name = "anchor")]
    Anchor,
    /// One proposal per frame from left/right extents; no anchor lattice.
    #[value(name = "anchor_free")]
    AnchorFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalSource {
    Anchor { t: usize, k: usize },
    AnchorFree { t: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub span_sec: TimeSpan,
    pub confidence: f64,
    /// Ranking score: the confidence until channels are fused in.
    pub score: f64,
    pub channel_scores: BTreeMap<String, f64>,
    pub source: ProposalSource,
    /// Position in the decoder's output, used as the final tie-break.
    pub source_index: usize,
}

impl Proposal {
    fn new(span_sec: TimeSpan, confidence: f64, source: ProposalSource, source_index: usize) -> Self {
        Self {
            span_sec,
            confidence,
            score: confidence,
            channel_scores: BTreeMap::new(),
            source,
            source_index,
        }
    }
}

/// A decoded index-unit span and its Jacobian with respect to the two raw
/// regression outputs of its row: `d_start[j] = ∂start/∂raw_j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedSpan {
    pub start: f64,
    pub end: f64,
    pub d_start: [f64; 2],
    pub d_end: [f64; 2],
}

#[inline]
fn clamp_with_grad(x: f64, hi: f64) -> (f64, f64) {
    if x < 0.0 {
        (0.0, 0.0)
    } else if x > hi {
        (hi, 0.0)
    } else {
        (x, 1.0)
    }
}

/// `[a_s + d_s·w, a_e + d_e·w]`, clamped to `[0, T]`, endpoints swapped if inverted.
pub fn decode_anchor_span(anchor: &TimeSpan, window: f64, offsets: [f64; 2], num_frames: f64) -> DecodedSpan {
    let (s, gs) = clamp_with_grad(anchor.start + offsets[0] * window, num_frames);
    let (e, ge) = clamp_with_grad(anchor.end + offsets[1] * window, num_frames);
    let d_s = [gs * window, 0.0];
    let d_e = [0.0, ge * window];
    if s <= e {
        DecodedSpan {
            start: s,
            end: e,
            d_start: d_s,
            d_end: d_e,
        }
    } else {
        DecodedSpan {
            start: e,
            end: s,
            d_start: d_e,
            d_end: d_s,
        }
    }
}

/// `[t + 0.5 - softplus(r_0)·T, t + 0.5 + softplus(r_1)·T]`, clamped to `[0, T]`.
pub fn decode_frame_span(t: usize, raw: [f64; 2], num_frames: f64) -> DecodedSpan {
    let center = t as f64 + 0.5;
    let (s, gs) = clamp_with_grad(center - softplus(raw[0]) * num_frames, num_frames);
    let (e, ge) = clamp_with_grad(center + softplus(raw[1]) * num_frames, num_frames);
    DecodedSpan {
        start: s,
        end: e,
        d_start: [-gs * num_frames * sigmoid(raw[0]), 0.0],
        d_end: [0.0, ge * num_frames * sigmoid(raw[1])],
    }
}

fn check_output(output: &ModelOutput, rows: usize, scales: usize) -> Result<()> {
    if output.confidence.shape() != (rows, scales) || output.offsets.shape() != (rows, 2 * scales) {
        return Err(Error::Shape(format!(
            "head outputs {:?} / {:?} do not match {rows} frames x {scales} scales",
            output.confidence.shape(),
            output.offsets.shape()
        )));
    }
    Ok(())
}

fn to_seconds(span: &DecodedSpan, grid: &FrameGrid) -> Result<TimeSpan> {
    index_to_sec(&TimeSpan::raw(span.start, span.end, Units::Index), grid)
}

/// Index-unit spans for every anchor, in `t`-major order.
pub fn decode_anchor_spans(offsets: &Matrix, anchors: &AnchorSet) -> Vec<DecodedSpan> {
    let k_len = anchors.num_scales();
    let t_len = anchors.num_frames() as f64;
    let mut out = Vec::with_capacity(anchors.len());
    for t in 0..anchors.num_frames() {
        let row = offsets.row(t);
        for k in 0..k_len {
            out.push(decode_anchor_span(
                anchors.get(t, k),
                anchors.window_sizes[k],
                [row[2 * k], row[2 * k + 1]],
                t_len,
            ));
        }
    }
    out
}

pub fn decode_frame_spans(offsets: &Matrix) -> Vec<DecodedSpan> {
    let t_len = offsets.rows() as f64;
    (0..offsets.rows())
        .map(|t| decode_frame_span(t, [offsets.get(t, 0), offsets.get(t, 1)], t_len))
        .collect()
}

pub fn decode_proposals(output: &ModelOutput, anchors: &AnchorSet, grid: &FrameGrid) -> Result<Vec<Proposal>> {
    check_output(output, anchors.num_frames(), anchors.num_scales())?;
    if grid.num_frames != anchors.num_frames() {
        return Err(Error::Shape(format!(
            "grid has {} frames, anchors {}",
            grid.num_frames,
            anchors.num_frames()
        )));
    }
    let k_len = anchors.num_scales();
    decode_anchor_spans(&output.offsets, anchors)
        .iter()
        .enumerate()
        .map(|(i, span)| {
            let (t, k) = (i / k_len, i % k_len);
            Ok(Proposal::new(
                to_seconds(span, grid)?,
                output.confidence.get(t, k),
                ProposalSource::Anchor { t, k },
                i,
            ))
        })
        .collect()
}

pub fn decode_anchor_free(output: &ModelOutput, grid: &FrameGrid) -> Result<Vec<Proposal>> {
    check_output(output, grid.num_frames, 1)?;
    decode_frame_spans(&output.offsets)
        .iter()
        .enumerate()
        .map(|(t, span)| {
            Ok(Proposal::new(
                to_seconds(span, grid)?,
                output.confidence.get(t, 0),
                ProposalSource::AnchorFree { t },
                t,
            ))
        })
        .collect()
}

/// Score descending, then earlier start, then earlier source index.
pub fn rank_order(a: &Proposal, b: &Proposal) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.span_sec.start.total_cmp(&b.span_sec.start))
        .then(a.source_index.cmp(&b.source_index))
}

fn sorted(mut proposals: Vec<Proposal>) -> Vec<Proposal> {
    proposals.sort_by(rank_order);
    proposals
}

fn greedy(proposals: Vec<Proposal>, iou_threshold: f64, limit: usize) -> Vec<Proposal> {
    let mut kept: Vec<Proposal> = Vec::new();
    for p in sorted(proposals) {
        if kept.len() == limit {
            break;
        }
        let clear = kept.iter().all(|q| {
            interval_iou(p.span_sec.start, p.span_sec.end, q.span_sec.start, q.span_sec.end) <= iou_threshold
        });
        if clear {
            kept.push(p);
        }
    }
    kept
}

/// Greedy suppression: keeps a proposal iff its IoU with every kept one is at most the threshold.
pub fn nms(proposals: Vec<Proposal>, iou_threshold: f64) -> Result<Vec<Proposal>> {
    check_nms_threshold(iou_threshold)?;
    Ok(greedy(proposals, iou_threshold, usize::MAX))
}

/// Same result as `top_k(nms(..), k)` without suppressing past the `k`-th survivor.
pub fn nms_top_k(proposals: Vec<Proposal>, iou_threshold: f64, k: usize) -> Result<Vec<Proposal>> {
    check_nms_threshold(iou_threshold)?;
    check_k(k)?;
    Ok(greedy(proposals, iou_threshold, k))
}

fn check_nms_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidArgument(format!("nms threshold must be in (0, 1], got {t}")));
    }
    Ok(())
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("top-k needs k >= 1".into()));
    }
    Ok(())
}

pub fn top_k(proposals: Vec<Proposal>, k: usize) -> Result<Vec<Proposal>> {
    check_k(k)?;
    let mut out = sorted(proposals);
    out.truncate(k);
    Ok(out)
}

/// One external score list for one query, aligned with its proposals by rank.
#[derive(Debug, Clone, PartialEq)]
pub struct RerankChannel {
    pub name: String,
    pub weight: f64,
    pub scores: Vec<f64>,
}

/// Adds weighted channel scores to the confidences and re-sorts, keeping
/// the prior order among equal scores.
pub fn rerank(mut proposals: Vec<Proposal>, channels: &[RerankChannel]) -> Result<Vec<Proposal>> {
    for c in channels {
        if c.scores.len() != proposals.len() {
            return Err(Error::Alignment {
                channel: c.name.clone(),
                message: format!("{} scores for {} proposals", c.scores.len(), proposals.len()),
            });
        }
        if !c.weight.is_finite() || c.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Alignment {
                channel: c.name.clone(),
                message: "non-finite weight or score".into(),
            });
        }
    }
    for (i, p) in proposals.iter_mut().enumerate() {
        let mut score = p.confidence;
        for c in channels {
            score += c.weight * c.scores[i];
            p.channel_scores.insert(c.name.clone(), c.scores[i]);
        }
        p.score = score;
    }
    proposals.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(proposals)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    pub top_k: usize,
    /// Zero disables suppression.
    pub nms_iou: f64,
    pub mode: PredictionMode,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            nms_iou: DEFAULT_NMS_IOU,
            mode: PredictionMode::Anchor,
        }
    }
}

impl PredictOptions {
    pub fn validate(&self) -> Result<()> {
        check_k(self.top_k)?;
        if self.nms_iou != 0.0 {
            check_nms_threshold(self.nms_iou)?;
        }
        Ok(())
    }
}

/// Ranked proposals for one sample. `anchors` is ignored in anchor-free mode.
pub fn predict_sample(
    model: &GroundingModel,
    anchors: &AnchorSet,
    sample: &Sample,
    opts: &PredictOptions,
) -> Result<Vec<Proposal>> {
    let video_mask = vec![true; sample.video.rows()];
    let text_mask = vec![true; sample.text.rows()];
    let output = model.infer(&sample.video, &video_mask, &sample.text, &text_mask)?;
    let proposals = match opts.mode {
        PredictionMode::Anchor => decode_proposals(&output, anchors, &sample.grid)?,
        PredictionMode::AnchorFree => decode_anchor_free(&output, &sample.grid)?,
    };
    if opts.nms_iou > 0.0 {
        nms_top_k(proposals, opts.nms_iou, opts.top_k)
    } else {
        top_k(proposals, opts.top_k)
    }
}

/// Predictions for many samples, computed in parallel, returned in input order.
pub fn predict_samples(
    model: &GroundingModel,
    anchors: &AnchorSet,
    samples: &[Sample],
    opts: &PredictOptions,
) -> Result<Vec<QueryPrediction>> {
    opts.validate()?;
    samples
        .par_iter()
        .map(|s| {
            let ranked = predict_sample(model, anchors, s, opts)?;
            Ok(QueryPrediction::from_proposals(&s.query_id, &s.video_id, &ranked))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedSpan {
    pub start_sec: f64,
    pub end_sec: f64,
    pub score: f64,
}

/// One line of a predictions file; proposals are in rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryPrediction {
    pub query_id: String,
    pub video_id: String,
    pub proposals: Vec<PredictedSpan>,
}

impl QueryPrediction {
    pub fn from_proposals(query_id: &str, video_id: &str, ranked: &[Proposal]) -> Self {
        Self {
            query_id: query_id.to_string(),
            video_id: video_id.to_string(),
            proposals: ranked
                .iter()
                .map(|p| PredictedSpan {
                    start_sec: p.span_sec.start,
                    end_sec: p.span_sec.end,
                    score: p.score,
                })
                .collect(),
        }
    }

    /// Rebuilds proposals whose confidence is the recorded score.
    pub fn to_proposals(&self) -> Vec<Proposal> {
        self.proposals
            .iter()
            .enumerate()
            .map(|(i, p)| {
                Proposal::new(
                    TimeSpan::raw(p.start_sec, p.end_sec, Units::Seconds),
                    p.score,
                    ProposalSource::AnchorFree { t: i },
                    i,
                )
            })
            .collect()
    }
}

/// One line of a channel file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelScores {
    pub query_id: String,
    pub channel: String,
    pub scores: Vec<f64>,
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Applies `(channel file contents, weight)` pairs to every query of a predictions list.
pub fn rerank_predictions(
    predictions: &[QueryPrediction],
    channel_files: &[(Vec<ChannelScores>, f64)],
) -> Result<Vec<QueryPrediction>> {
    let mut by_query: BTreeMap<&str, Vec<RerankChannel>> = BTreeMap::new();
    for (entries, weight) in channel_files {
        for e in entries {
            by_query.entry(&e.query_id).or_default().push(RerankChannel {
                name: e.channel.clone(),
                weight: *weight,
                scores: e.scores.clone(),
            });
        }
    }
    let known: std::collections::BTreeSet<&str> = predictions.iter().map(|p| p.query_id.as_str()).collect();
    if let Some((q, chans)) = by_query.iter().find(|(q, _)| !known.contains(*q)) {
        return Err(Error::Alignment {
            channel: chans[0].name.clone(),
            message: format!("scores for query `{q}` which has no predictions"),
        });
    }
    predictions
        .iter()
        .map(|p| {
            let channels = by_query.get(p.query_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            let ranked = rerank(p.to_proposals(), channels)?;
            Ok(QueryPrediction::from_proposals(&p.query_id, &p.video_id, &ranked))
        })
        .collect()
}
