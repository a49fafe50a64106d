//! Training objective: IoU-aligned confidence loss, smooth-L1 boundary loss
//! over positive anchors, and their weighted sum. Each loss comes with its
//! analytic gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::span::TimeSpan;

/// Confidences are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const CONFIDENCE_EPS: f64 = 1e-7;
pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_MU: f64 = 1.0;

/// Units in which boundary residuals enter the smooth-L1 loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BoxUnits {
    /// Raw frame-index units.
    Raw,
    /// Residuals divided by the number of sampled frames.
    #[default]
    Normalized,
}

impl BoxUnits {
    pub fn norm(self, num_frames: usize) -> f64 {
        match self {
            BoxUnits::Raw => 1.0,
            BoxUnits::Normalized => num_frames as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub align: f64,
    #[serde(rename = "box")]
    pub box_: f64,
    pub total: f64,
    pub mu: f64,
    pub num_positives: usize,
}

/// Soft-target binary cross-entropy averaged over all anchors.
pub fn alignment_loss(iou_targets: &[f64], confidences: &[f64]) -> Result<f64> {
    check_alignment_inputs(iou_targets, confidences)?;
    let n = iou_targets.len() as f64;
    let sum: f64 = iou_targets
        .iter()
        .zip(confidences)
        .map(|(&o, &s)| {
            let s = s.clamp(CONFIDENCE_EPS, 1.0 - CONFIDENCE_EPS);
            o * s.ln() + (1.0 - o) * (1.0 - s).ln()
        })
        .sum();
    Ok(-sum / n)
}

/// `dL/ds_i = (s_i - o_i) / (n s_i (1 - s_i))`; zero where the clamp is active.
pub fn alignment_loss_grad(iou_targets: &[f64], confidences: &[f64]) -> Result<Vec<f64>> {
    check_alignment_inputs(iou_targets, confidences)?;
    let n = iou_targets.len() as f64;
    Ok(iou_targets
        .iter()
        .zip(confidences)
        .map(|(&o, &s)| {
            if !(CONFIDENCE_EPS..=1.0 - CONFIDENCE_EPS).contains(&s) {
                0.0
            } else {
                (s - o) / (n * s * (1.0 - s))
            }
        })
        .collect())
}

fn check_alignment_inputs(iou_targets: &[f64], confidences: &[f64]) -> Result<()> {
    if iou_targets.is_empty() {
        return Err(Error::InvalidArgument("alignment loss over zero anchors".into()));
    }
    if iou_targets.len() != confidences.len() {
        return Err(Error::Shape(format!(
            "{} targets vs {} confidences",
            iou_targets.len(),
            confidences.len()
        )));
    }
    Ok(())
}

#[inline]
pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let ax = x.abs();
    if ax < beta {
        0.5 * x * x / beta
    } else {
        ax - 0.5 * beta
    }
}

#[inline]
pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Mean over positive anchors of the smooth-L1 start and end residuals,
/// each divided by `norm` first.
pub fn boundary_loss(pred_spans: &[TimeSpan], gt: &TimeSpan, positive_mask: &[bool], beta: f64, norm: f64) -> Result<f64> {
    let n_pos = check_boundary_inputs(pred_spans, positive_mask, beta, norm)?;
    let sum: f64 = pred_spans
        .iter()
        .zip(positive_mask)
        .filter(|(_, &p)| p)
        .map(|(s, _)| smooth_l1((s.start - gt.start) / norm, beta) + smooth_l1((s.end - gt.end) / norm, beta))
        .sum();
    Ok(sum / n_pos as f64)
}

/// Gradient of [`boundary_loss`] with respect to each predicted `(start, end)`.
pub fn boundary_loss_grad(
    pred_spans: &[TimeSpan],
    gt: &TimeSpan,
    positive_mask: &[bool],
    beta: f64,
    norm: f64,
) -> Result<Vec<(f64, f64)>> {
    let n_pos = check_boundary_inputs(pred_spans, positive_mask, beta, norm)? as f64;
    Ok(pred_spans
        .iter()
        .zip(positive_mask)
        .map(|(s, &p)| {
            if p {
                (
                    smooth_l1_grad((s.start - gt.start) / norm, beta) / (norm * n_pos),
                    smooth_l1_grad((s.end - gt.end) / norm, beta) / (norm * n_pos),
                )
            } else {
                (0.0, 0.0)
            }
        })
        .collect())
}

fn check_boundary_inputs(pred_spans: &[TimeSpan], positive_mask: &[bool], beta: f64, norm: f64) -> Result<usize> {
    if pred_spans.len() != positive_mask.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} mask entries",
            pred_spans.len(),
            positive_mask.len()
        )));
    }
    if !(beta > 0.0 && norm > 0.0) {
        return Err(Error::InvalidArgument(format!("beta ({beta}) and norm ({norm}) must be positive")));
    }
    let n_pos = positive_mask.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::NoPositives);
    }
    Ok(n_pos)
}

pub fn total_loss(align: f64, box_: f64, mu: f64) -> LossBreakdown {
    LossBreakdown {
        align,
        box_,
        total: align + mu * box_,
        mu,
        num_positives: 0,
    }
}

impl LossBreakdown {
    pub fn with_positives(mut self, num_positives: usize) -> Self {
        self.num_positives = num_positives;
        self
    }
}
