//! Planted-signal dataset generator.
//!
//! Every query owns a unit signature `u`. Its tokens are noisy copies of
//! `u` and the frames inside its span carry `P·u` for a dataset-wide random
//! map `P`. Elsewhere frames are standard normal noise, with a few distractor
//! segments carrying the signature of a query from a different video, so a
//! model can only localize by matching the query against the frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::annotations::QueryAnnotation;
use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::Matrix;

pub const DISTRACTORS_PER_VIDEO: usize = 2;
const MAX_PLACEMENT_TRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    /// Raw feature steps per video; one step lasts one second.
    pub frames_per_video: usize,
    pub feature_dim: usize,
    pub text_dim: usize,
    pub tokens_per_query: usize,
    pub queries_per_video: usize,
    #[serde(default = "default_span_range")]
    pub span_fraction_range: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

fn default_span_range() -> (f64, f64) {
    (0.01, 0.08)
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_videos: 4,
            frames_per_video: 256,
            feature_dim: 32,
            text_dim: 16,
            tokens_per_query: 8,
            queries_per_video: 2,
            span_fraction_range: default_span_range(),
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let (lo, hi) = self.span_fraction_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("span fraction range ({lo}, {hi}) must satisfy 0 < min <= max <= 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be nonnegative, got {}", self.noise_sigma));
        }
        for (name, v) in [
            ("num_videos", self.num_videos),
            ("frames_per_video", self.frames_per_video),
            ("feature_dim", self.feature_dim),
            ("text_dim", self.text_dim),
            ("tokens_per_query", self.tokens_per_query),
            ("queries_per_video", self.queries_per_video),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        // the spans of one video must fit side by side
        if hi * self.queries_per_video as f64 > 1.0 {
            return bad(format!(
                "{} spans of up to {hi} of the video cannot be placed without overlap",
                self.queries_per_video
            ));
        }
        Ok(())
    }
}

pub fn video_id(index: usize) -> String {
    format!("vid{index:05}")
}

fn overlaps(a: (f64, f64), taken: &[(f64, f64)]) -> bool {
    taken.iter().any(|&(s, e)| a.0 < e && s < a.1)
}

/// Draws a span of `fraction * len` seconds that does not overlap `taken`.
fn place_span(rng: &mut ChaCha8Rng, len: f64, fraction: f64, taken: &[(f64, f64)]) -> Option<(f64, f64)> {
    let width = fraction * len;
    for _ in 0..MAX_PLACEMENT_TRIES {
        let start = rng.random::<f64>() * (len - width);
        let span = (start, start + width);
        if !overlaps(span, taken) {
            return Some(span);
        }
    }
    None
}

/// Raw frames whose midpoint lies in the span; the frame holding the
/// span center when the span is too short to contain a midpoint.
pub fn frames_in_span(start: f64, end: f64, num_frames: usize) -> std::ops::Range<usize> {
    let first = (start - 0.5).ceil().max(0.0) as usize;
    let last = ((end - 0.5).floor() + 1.0).max(0.0) as usize;
    let last = last.min(num_frames);
    if first < last {
        first..last
    } else {
        let c = ((0.5 * (start + end)).floor() as usize).min(num_frames - 1);
        c..c + 1
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn project(p: &Matrix, u: &[f64]) -> Vec<f64> {
    (0..p.rows()).map(|r| p.row(r).iter().zip(u).map(|(a, b)| a * b).sum()).collect()
}

struct PlannedQuery {
    signature: Vec<f64>,
    span: (f64, f64),
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let len = spec.frames_per_video as f64;
    let (lo, hi) = spec.span_fraction_range;

    let p = Matrix::from_vec(
        spec.feature_dim,
        spec.text_dim,
        (0..spec.feature_dim * spec.text_dim).map(|_| StandardNormal.sample(&mut rng)).collect(),
    )?;

    // plan every query first so distractors can borrow signatures across videos
    let mut plan: Vec<Vec<PlannedQuery>> = Vec::with_capacity(spec.num_videos);
    for _ in 0..spec.num_videos {
        let mut taken = Vec::new();
        let mut queries = Vec::new();
        for _ in 0..spec.queries_per_video {
            let fraction = rng.random_range(lo..=hi);
            let span = place_span(&mut rng, len, fraction, &taken)
                .ok_or_else(|| Error::InvalidArgument("could not place non-overlapping query spans".into()))?;
            taken.push(span);
            queries.push(PlannedQuery {
                signature: unit_vector(&mut rng, spec.text_dim),
                span,
            });
        }
        plan.push(queries);
    }

    let mut dataset = Dataset::default();
    for (v, queries) in plan.iter().enumerate() {
        let vid = video_id(v);
        let mut frames = Matrix::zeros(spec.frames_per_video, spec.feature_dim);
        for x in frames.data_mut() {
            *x = StandardNormal.sample(&mut rng);
        }

        let mut taken: Vec<(f64, f64)> = queries.iter().map(|q| q.span).collect();
        for _ in 0..DISTRACTORS_PER_VIDEO {
            let fraction = rng.random_range(lo..=hi);
            let Some(span) = place_span(&mut rng, len, fraction, &taken) else {
                break;
            };
            taken.push(span);
            let signature = if spec.num_videos > 1 {
                let mut other = rng.random_range(0..spec.num_videos - 1);
                if other >= v {
                    other += 1;
                }
                plan[other][rng.random_range(0..spec.queries_per_video)].signature.clone()
            } else {
                unit_vector(&mut rng, spec.text_dim)
            };
            let planted = project(&p, &signature);
            for f in frames_in_span(span.0, span.1, spec.frames_per_video) {
                for (x, s) in frames.row_mut(f).iter_mut().zip(&planted) {
                    *x += s;
                }
            }
        }

        for (q, query) in queries.iter().enumerate() {
            let planted = project(&p, &query.signature);
            for f in frames_in_span(query.span.0, query.span.1, spec.frames_per_video) {
                for (x, s) in frames.row_mut(f).iter_mut().zip(&planted) {
                    *x = s + noise.sample(&mut rng);
                }
            }
            let mut tokens = Matrix::zeros(spec.tokens_per_query, spec.text_dim);
            for r in 0..spec.tokens_per_query {
                for (x, s) in tokens.row_mut(r).iter_mut().zip(&query.signature) {
                    *x = s + noise.sample(&mut rng);
                }
            }
            let qid = format!("{vid}_q{q}");
            dataset.queries.insert(qid.clone(), tokens);
            dataset.annotations.push(QueryAnnotation {
                video_id: vid.clone(),
                query_id: qid.clone(),
                text: format!("planted query {qid}"),
                start_sec: query.span.0,
                end_sec: query.span.1,
                duration_sec: len,
            });
        }
        dataset.videos.insert(vid, frames);
    }
    Ok(dataset)
}
