//! `NLQC` checkpoint container.
//!
//! ```text
//! "NLQC" | version: u32 LE | header_len: u64 LE | header JSON | f32 LE payloads
//! ```
//!
//! The header holds the encoder config, the init seed, free-form metadata and
//! a manifest of `(name, rows, cols, offset)` where `offset` is the byte
//! position of the block inside the payload section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::model::{EncoderConfig, GroundingModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NLQC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    seed: u64,
    #[serde(default)]
    metadata: serde_json::Value,
    parameters: Vec<ManifestEntry>,
}

fn format_err(message: impl Into<String>) -> Error {
    Error::Format {
        id: "checkpoint".into(),
        message: message.into(),
    }
}

pub fn encode_checkpoint(model: &GroundingModel, metadata: &serde_json::Value) -> Result<Vec<u8>> {
    let mut parameters = Vec::with_capacity(model.params.len());
    let mut offset = 0u64;
    for p in model.params.iter() {
        parameters.push(ManifestEntry {
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
            offset,
        });
        offset += 4 * p.value.len() as u64;
    }
    let header = serde_json::to_vec(&Header {
        encoder: model.config.clone(),
        seed: model.seed,
        metadata: metadata.clone(),
        parameters,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in model.params.iter() {
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(GroundingModel, serde_json::Value)> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..payload_start]).map_err(|e| format_err(format!("header: {e}")))?;
    let payload = &bytes[payload_start..];

    let mut model = GroundingModel::init(&header.encoder, header.seed)?;
    let layout: Vec<(String, usize, usize)> = header
        .parameters
        .iter()
        .map(|e| (e.name.clone(), e.rows, e.cols))
        .collect();
    model.params.check_layout(&layout)?;
    for (entry, param) in header.parameters.iter().zip(model.params.iter_mut()) {
        let n = entry.rows * entry.cols;
        let start = entry.offset as usize;
        let end = start + 4 * n;
        if end > payload.len() {
            return Err(format_err(format!("truncated payload for `{}`", entry.name)));
        }
        let values: Vec<f64> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        param.value = Matrix::from_vec(entry.rows, entry.cols, values)?;
    }
    Ok((model, header.metadata))
}

pub fn save_checkpoint(path: &Path, model: &GroundingModel, metadata: &serde_json::Value) -> Result<()> {
    let bytes = encode_checkpoint(model, metadata)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(GroundingModel, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
