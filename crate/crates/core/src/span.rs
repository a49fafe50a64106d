//! Interval arithmetic on the video timeline.
//!
//! Every span in the pipeline (anchors, ground truth, proposals) is a
//! [`TimeSpan`] tagged with its units. Index units are continuous reals in
//! `[0, T]` where frame `i` covers `[i, i + 1)`; second units run over
//! `[0, duration]`. The two are related by an exact linear map carried by
//! [`FrameGrid`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    Seconds,
    Index,
}

/// A closed interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSpan {
    pub start: f64,
    pub end: f64,
    pub units: Units,
}

impl TimeSpan {
    /// Builds a validated span (`0 <= start <= end`, both finite).
    pub fn new(start: f64, end: f64, units: Units) -> Result<Self> {
        let span = Self { start, end, units };
        if !span.is_valid() {
            return Err(Error::InvalidArgument(format!(
                "span [{start}, {end}] violates 0 <= start <= end"
            )));
        }
        Ok(span)
    }

    pub fn seconds(start: f64, end: f64) -> Result<Self> {
        Self::new(start, end, Units::Seconds)
    }

    pub fn index(start: f64, end: f64) -> Result<Self> {
        Self::new(start, end, Units::Index)
    }

    /// Unchecked constructor for intermediate spans (e.g. an anchor before clipping).
    pub fn raw(start: f64, end: f64, units: Units) -> Self {
        Self { start, end, units }
    }

    pub fn is_valid(&self) -> bool {
        self.start.is_finite() && self.end.is_finite() && self.start >= 0.0 && self.start <= self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

/// The sampled key-frame lattice of one video.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameGrid {
    pub num_frames: usize,
    pub duration_sec: f64,
}

impl FrameGrid {
    pub fn new(num_frames: usize, duration_sec: f64) -> Result<Self> {
        if num_frames < 2 {
            return Err(Error::InvalidArgument(format!(
                "frame grid needs at least 2 frames, got {num_frames}"
            )));
        }
        if !(duration_sec.is_finite() && duration_sec > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "frame grid duration must be positive, got {duration_sec}"
            )));
        }
        Ok(Self {
            num_frames,
            duration_sec,
        })
    }

    pub fn frames_per_second(&self) -> f64 {
        self.num_frames as f64 / self.duration_sec
    }
}

/// IoU of two raw intervals. A zero-length union yields 0.
#[inline]
pub fn interval_iou(a_start: f64, a_end: f64, b_start: f64, b_end: f64) -> f64 {
    let inter = (a_end.min(b_end) - a_start.max(b_start)).max(0.0);
    let union = (a_end - a_start) + (b_end - b_start) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Temporal intersection over union.
pub fn iou(a: &TimeSpan, b: &TimeSpan) -> Result<f64> {
    if a.units != b.units {
        return Err(Error::InvalidArgument(format!(
            "iou between {:?} and {:?} spans",
            a.units, b.units
        )));
    }
    Ok(interval_iou(a.start, a.end, b.start, b.end))
}

pub fn sec_to_index(span: &TimeSpan, grid: &FrameGrid) -> Result<TimeSpan> {
    if span.units != Units::Seconds {
        return Err(Error::InvalidArgument("expected a span in seconds".into()));
    }
    if !span.is_valid() || span.end > grid.duration_sec {
        return Err(Error::OutOfRange(format!(
            "span [{}, {}]s outside video of {}s",
            span.start, span.end, grid.duration_sec
        )));
    }
    let t = grid.num_frames as f64;
    let scale = t / grid.duration_sec;
    Ok(TimeSpan::raw(
        (span.start * scale).clamp(0.0, t),
        (span.end * scale).clamp(0.0, t),
        Units::Index,
    ))
}

pub fn index_to_sec(span: &TimeSpan, grid: &FrameGrid) -> Result<TimeSpan> {
    if span.units != Units::Index {
        return Err(Error::InvalidArgument("expected a span in index units".into()));
    }
    let t = grid.num_frames as f64;
    if !span.is_valid() || span.end > t {
        return Err(Error::OutOfRange(format!(
            "span [{}, {}] outside index range [0, {t}]",
            span.start, span.end
        )));
    }
    let scale = grid.duration_sec / t;
    Ok(TimeSpan::raw(
        (span.start * scale).clamp(0.0, grid.duration_sec),
        (span.end * scale).clamp(0.0, grid.duration_sec),
        Units::Seconds,
    ))
}

/// Clamps both endpoints into `[lo, hi]`. Requires `lo <= hi`.
pub fn clamp_span(span: &TimeSpan, lo: f64, hi: f64) -> TimeSpan {
    debug_assert!(lo <= hi);
    TimeSpan::raw(span.start.clamp(lo, hi), span.end.clamp(lo, hi), span.units)
}
