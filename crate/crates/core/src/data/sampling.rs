use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::span::FrameGrid;

/// Source row for output row `i` under uniform striding.
#[inline]
pub fn source_row(i: usize, raw_len: usize, target_len: usize) -> usize {
    // u128 keeps `i * raw_len` exact for any realistic lengths
    ((i as u128 * raw_len as u128) / target_len as u128) as usize
}

/// Picks `target_len` key frames from `features` by uniform striding,
/// repeating rows when the input is shorter than the target.
pub fn sample_frames(features: &Matrix, target_len: usize, duration_sec: f64) -> Result<(Matrix, FrameGrid)> {
    let raw_len = features.rows();
    if raw_len == 0 {
        return Err(Error::InvalidArgument("cannot sample frames from an empty feature matrix".into()));
    }
    let grid = FrameGrid::new(target_len, duration_sec)?;
    let cols = features.cols();
    let mut data = Vec::with_capacity(target_len * cols);
    for i in 0..target_len {
        data.extend_from_slice(features.row(source_row(i, raw_len, target_len)));
    }
    Ok((Matrix::from_vec(target_len, cols, data)?, grid))
}
