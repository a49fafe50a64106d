//! Feature and annotation I/O, key-frame sampling, batching and the
//! synthetic dataset generator.
//!
//! A dataset directory holds `video_features/` and `query_features/`
//! containers plus `annotations.json`.

pub mod annotations;
pub mod batch;
pub mod features;
pub mod sampling;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

pub use annotations::{read_annotations, write_annotations, QueryAnnotation};
pub use batch::{make_batches, prepare_samples, Batch, BatchItem, Sample};
pub use features::{read_features, write_features};
pub use sampling::sample_frames;
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::nn::Matrix;

pub const VIDEO_DIR: &str = "video_features";
pub const QUERY_DIR: &str = "query_features";
pub const ANNOTATIONS_FILE: &str = "annotations.json";

/// Video features keyed by video id, token embeddings keyed by query id,
/// and the annotations tying them together.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub videos: BTreeMap<String, Matrix>,
    pub queries: BTreeMap<String, Matrix>,
    pub annotations: Vec<QueryAnnotation>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for (id, m) in &self.videos {
            if m.rows() == 0 || !m.is_finite() {
                return Err(Error::Input(format!("video `{id}` has no rows or non-finite features")));
            }
        }
        let mut video_dim = None;
        let mut text_dim = None;
        for a in &self.annotations {
            let invalid = |message: String| Error::Validation {
                query_id: a.query_id.clone(),
                message,
            };
            let video = self
                .videos
                .get(&a.video_id)
                .ok_or_else(|| invalid(format!("no features for video `{}`", a.video_id)))?;
            let text = self.queries.get(&a.query_id).ok_or_else(|| invalid("no token embeddings".into()))?;
            if text.rows() == 0 || !text.is_finite() {
                return Err(invalid("token embeddings are empty or non-finite".into()));
            }
            if *video_dim.get_or_insert(video.cols()) != video.cols() {
                return Err(invalid("video feature width differs across videos".into()));
            }
            if *text_dim.get_or_insert(text.cols()) != text.cols() {
                return Err(invalid("token embedding width differs across queries".into()));
            }
        }
        Ok(())
    }

    /// `(video feature width, token embedding width)`, taken from the first annotation.
    pub fn dims(&self) -> Option<(usize, usize)> {
        let a = self.annotations.first()?;
        Some((self.videos.get(&a.video_id)?.cols(), self.queries.get(&a.query_id)?.cols()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        write_features(&dir.join(VIDEO_DIR), &self.videos)?;
        write_features(&dir.join(QUERY_DIR), &self.queries)?;
        write_annotations(&dir.join(ANNOTATIONS_FILE), &self.annotations)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ds = Self {
            videos: read_features(&dir.join(VIDEO_DIR))?,
            queries: read_features(&dir.join(QUERY_DIR))?,
            annotations: read_annotations(&dir.join(ANNOTATIONS_FILE))?,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Moves the last `count` videos (in id order) and their queries into a
    /// second dataset.
    pub fn split_off_videos(mut self, count: usize) -> Result<(Dataset, Dataset)> {
        if count >= self.videos.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot hold out {count} of {} videos",
                self.videos.len()
            )));
        }
        let keep = self.videos.len() - count;
        let held: BTreeSet<String> = self.videos.keys().skip(keep).cloned().collect();
        let mut other = Dataset::default();
        for id in &held {
            let m = self.videos.remove(id).expect("key exists");
            other.videos.insert(id.clone(), m);
        }
        let (moved, kept): (Vec<_>, Vec<_>) = self.annotations.into_iter().partition(|a| held.contains(&a.video_id));
        self.annotations = kept;
        for a in &moved {
            if let Some(m) = self.queries.remove(&a.query_id) {
                other.queries.insert(a.query_id.clone(), m);
            }
        }
        other.annotations = moved;
        Ok((self, other))
    }
}
