//! Multi-scale anchor lattice and IoU labelling.
//!
//! For every sampled frame `t` and scale `r_k` an anchor of width
//! `w_k = r_k * T` is centred on the frame midpoint `t + 0.5` and clipped to
//! `[0, T]`. Spans are stored t-major, k-minor: anchor `(t, k)` lives at
//! `t * K + k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::span::{clamp_span, interval_iou, TimeSpan, Units};

pub const DEFAULT_POSITIVE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    pub scales: Vec<f64>,
    pub num_frames: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales: vec![0.01, 0.03],
            num_frames: 600,
        }
    }
}

impl AnchorConfig {
    pub fn new(scales: Vec<f64>, num_frames: usize) -> Result<Self> {
        let config = Self { scales, num_frames };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::InvalidArgument("anchor scales must be non-empty".into()));
        }
        if self.scales.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "anchor scales must lie in (0, 1], got {:?}",
                self.scales
            )));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "anchor scales must be strictly increasing, got {:?}",
                self.scales
            )));
        }
        if self.num_frames < 1 {
            return Err(Error::InvalidArgument("anchor lattice needs at least one frame".into()));
        }
        Ok(())
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub spans: Vec<TimeSpan>,
    pub window_sizes: Vec<f64>,
    pub config: AnchorConfig,
}

impl AnchorSet {
    pub fn num_frames(&self) -> usize {
        self.config.num_frames
    }

    pub fn num_scales(&self) -> usize {
        self.window_sizes.len()
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn get(&self, t: usize, k: usize) -> &TimeSpan {
        &self.spans[t * self.num_scales() + k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLabels {
    pub iou_targets: Vec<f64>,
    pub positive_mask: Vec<bool>,
    pub num_positives: usize,
}

impl AnchorLabels {
    /// Marks the highest-IoU anchor positive when none cleared the threshold.
    /// Returns whether a positive was forced. Ties go to the lowest index.
    pub fn ensure_positive(&mut self) -> bool {
        if self.num_positives > 0 || self.iou_targets.is_empty() {
            return false;
        }
        let mut best = 0;
        for (i, &o) in self.iou_targets.iter().enumerate() {
            if o > self.iou_targets[best] {
                best = i;
            }
        }
        self.positive_mask[best] = true;
        self.num_positives = 1;
        true
    }
}

pub fn build_lattice(config: &AnchorConfig) -> Result<AnchorSet> {
    config.validate()?;
    let t_len = config.num_frames as f64;
    let window_sizes: Vec<f64> = config.scales.iter().map(|r| r * t_len).collect();
    let mut spans = Vec::with_capacity(config.num_frames * window_sizes.len());
    for t in 0..config.num_frames {
        let center = t as f64 + 0.5;
        for &w in &window_sizes {
            let raw = TimeSpan::raw(center - 0.5 * w, center + 0.5 * w, Units::Index);
            spans.push(clamp_span(&raw, 0.0, t_len));
        }
    }
    Ok(AnchorSet {
        spans,
        window_sizes,
        config: config.clone(),
    })
}

/// IoU targets and positivity (`iou > threshold`) of every anchor against `gt`.
pub fn label_anchors(anchors: &AnchorSet, gt: &TimeSpan, threshold: f64) -> Result<AnchorLabels> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "positive threshold must lie in [0, 1), got {threshold}"
        )));
    }
    let t_len = anchors.num_frames() as f64;
    if gt.units != Units::Index || !gt.is_valid() || gt.end > t_len {
        return Err(Error::OutOfRange(format!(
            "ground truth [{}, {}] outside lattice [0, {t_len}]",
            gt.start, gt.end
        )));
    }
    let iou_targets: Vec<f64> = anchors
        .spans
        .iter()
        .map(|a| interval_iou(a.start, a.end, gt.start, gt.end))
        .collect();
    let positive_mask: Vec<bool> = iou_targets.iter().map(|&o| o > threshold).collect();
    let num_positives = positive_mask.iter().filter(|&&p| p).count();
    Ok(AnchorLabels {
        iou_targets,
        positive_mask,
        num_positives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::span::iou;
    use proptest::prelude::*;

    #[test]
    fn config_validation() {
        assert!(AnchorConfig::new(vec![], 10).is_err());
        assert!(AnchorConfig::new(vec![0.3, 0.2], 10).is_err());
        assert!(AnchorConfig::new(vec![0.2, 0.2], 10).is_err());
        assert!(AnchorConfig::new(vec![0.0], 10).is_err());
        assert!(AnchorConfig::new(vec![1.5], 10).is_err());
        assert!(AnchorConfig::new(vec![1.0], 10).is_ok());
    }

    #[test]
    fn lattice_small_example() {
        let set = build_lattice(&AnchorConfig::new(vec![0.2, 0.4], 10).unwrap()).unwrap();
        assert_eq!(set.window_sizes, vec![2.0, 4.0]);
        assert_eq!(set.len(), 20);
        let a = set.get(5, 0);
        assert_eq!((a.start, a.end), (4.5, 6.5));
        let a = set.get(5, 1);
        assert_eq!((a.start, a.end), (3.5, 7.5));
    }

    #[test]
    fn lattice_left_clip() {
        let set = build_lattice(&AnchorConfig::new(vec![0.2], 10).unwrap()).unwrap();
        let a = set.get(0, 0);
        assert_eq!((a.start, a.end), (0.0, 1.5));
    }

    #[test]
    fn lattice_default_configuration() {
        let set = build_lattice(&AnchorConfig::default()).unwrap();
        assert_eq!(set.window_sizes, vec![6.0, 18.0]);
        assert_eq!(set.len(), 1200);
    }

    #[test]
    fn labelling_example() {
        let set = build_lattice(&AnchorConfig::new(vec![0.2], 10).unwrap()).unwrap();
        let gt = TimeSpan::index(4.5, 6.5).unwrap();
        let labels = label_anchors(&set, &gt, 0.5).unwrap();
        assert_eq!(labels.iou_targets[5], 1.0);
        assert!(labels.positive_mask[5]);
        assert!((labels.iou_targets[4] - 1.0 / 3.0).abs() < 1e-15);
        assert!(!labels.positive_mask[4]);
        assert_eq!(labels.iou_targets[0], 0.0);
        assert!(!labels.positive_mask[0]);
        assert_eq!(labels.num_positives, 1);
    }

    #[test]
    fn labelling_rejects_bad_inputs() {
        let set = build_lattice(&AnchorConfig::new(vec![0.2], 10).unwrap()).unwrap();
        let outside = TimeSpan::index(4.0, 11.0).unwrap();
        assert!(matches!(label_anchors(&set, &outside, 0.5), Err(Error::OutOfRange(_))));
        let gt = TimeSpan::index(4.0, 5.0).unwrap();
        assert!(label_anchors(&set, &gt, 1.0).is_err());
    }

    #[test]
    fn forced_positive_picks_best_anchor() {
        let set = build_lattice(&AnchorConfig::new(vec![0.1], 20).unwrap()).unwrap();
        // a tiny span: no anchor of width 2 exceeds IoU 0.5 with it
        let gt = TimeSpan::index(7.3, 7.6).unwrap();
        let mut labels = label_anchors(&set, &gt, 0.5).unwrap();
        assert_eq!(labels.num_positives, 0);
        assert!(labels.ensure_positive());
        assert_eq!(labels.num_positives, 1);
        let best = labels.positive_mask.iter().position(|&p| p).unwrap();
        assert_eq!(best, 7);
        assert!(!labels.ensure_positive());
    }

    proptest! {
        #[test]
        fn lattice_properties(t in 2usize..200, a in 0.01f64..0.5, b in 0.0f64..0.5) {
            let scales = if b > 0.01 { vec![a, (a + b).min(1.0)] } else { vec![a] };
            prop_assume!(scales.windows(2).all(|w| w[0] < w[1]));
            let set = build_lattice(&AnchorConfig::new(scales.clone(), t).unwrap()).unwrap();
            prop_assert_eq!(set.len(), t * scales.len());
            for (i, s) in set.spans.iter().enumerate() {
                prop_assert!(0.0 <= s.start && s.start <= s.end && s.end <= t as f64);
                let k = i % scales.len();
                let c = (i / scales.len()) as f64 + 0.5;
                let w = set.window_sizes[k];
                if c - 0.5 * w >= 0.0 && c + 0.5 * w <= t as f64 {
                    prop_assert!((s.length() - scales[k] * t as f64).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn labels_match_brute_force(t in 2usize..80, s in 0.0f64..1.0, len in 0.0f64..1.0, th in 0.0f64..0.99) {
            let set = build_lattice(&AnchorConfig::new(vec![0.05, 0.2], t).unwrap()).unwrap();
            let tf = t as f64;
            let start = s * tf;
            let gt = TimeSpan::index(start, (start + len * tf).min(tf)).unwrap();
            let labels = label_anchors(&set, &gt, th).unwrap();
            let mut count = 0;
            for (i, a) in set.spans.iter().enumerate() {
                let o = iou(a, &gt).unwrap();
                prop_assert_eq!(labels.iou_targets[i], o);
                prop_assert_eq!(labels.positive_mask[i], o > th);
                count += usize::from(o > th);
            }
            prop_assert_eq!(labels.num_positives, count);
            let looser = label_anchors(&set, &gt, th * 0.5).unwrap();
            prop_assert!(looser.num_positives >= labels.num_positives);
        }
    }
}
