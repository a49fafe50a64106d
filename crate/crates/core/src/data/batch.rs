use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sampling::sample_frames;
use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::span::{sec_to_index, FrameGrid, TimeSpan};

/// One query ready for the model: sampled video, token embeddings and the
/// ground truth in both unit systems.
#[derive(Debug, Clone)]
pub struct Sample {
    pub query_id: String,
    pub video_id: String,
    pub video: Matrix,
    pub text: Matrix,
    pub grid: FrameGrid,
    pub gt_sec: TimeSpan,
    pub gt_index: TimeSpan,
}

pub fn prepare_samples(dataset: &Dataset, target_len: usize) -> Result<Vec<Sample>> {
    dataset.validate()?;
    let mut sampled: BTreeMap<&str, (Matrix, FrameGrid)> = BTreeMap::new();
    let mut out = Vec::with_capacity(dataset.annotations.len());
    for ann in &dataset.annotations {
        if !sampled.contains_key(ann.video_id.as_str()) {
            let raw = &dataset.videos[&ann.video_id];
            sampled.insert(&ann.video_id, sample_frames(raw, target_len, ann.duration_sec)?);
        }
        let (video, grid) = &sampled[ann.video_id.as_str()];
        let gt_sec = ann.span()?;
        out.push(Sample {
            query_id: ann.query_id.clone(),
            video_id: ann.video_id.clone(),
            video: video.clone(),
            text: dataset.queries[&ann.query_id].clone(),
            grid: *grid,
            gt_index: sec_to_index(&gt_sec, grid)?,
            gt_sec,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BatchItem {
    /// Index into the sample slice the batch was built from.
    pub sample: usize,
    /// Token embeddings zero-padded to the batch's longest query.
    pub text: Matrix,
    pub text_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

/// Visit order of `num_samples` samples for one epoch.
pub fn epoch_order(num_samples: usize, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed.wrapping_add(epoch));
    order.shuffle(&mut rng);
    order
}

pub fn make_batches(samples: &[Sample], batch_size: usize, shuffle_seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let order = epoch_order(samples.len(), shuffle_seed, epoch);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let max_len = chunk.iter().map(|&i| samples[i].text.rows()).max().unwrap_or(0);
            let items = chunk
                .iter()
                .map(|&i| {
                    let text = &samples[i].text;
                    let mut padded = Matrix::zeros(max_len, text.cols());
                    padded.data_mut()[..text.len()].copy_from_slice(text.data());
                    let mut text_mask = vec![false; max_len];
                    text_mask[..text.rows()].iter_mut().for_each(|m| *m = true);
                    BatchItem {
                        sample: i,
                        text: padded,
                        text_mask,
                    }
                })
                .collect();
            Batch { items }
        })
        .collect())
}
