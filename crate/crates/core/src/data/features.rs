//! `EGF1` feature container: a directory holding `manifest.json` plus one
//! binary file per matrix.
//!
//! Each file is `"EGF1" | rows: u32 LE | cols: u32 LE | rows*cols f32 LE`,
//! row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

pub const MAGIC: &[u8; 4] = b"EGF1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    /// id -> file name relative to the container directory.
    pub files: BTreeMap<String, String>,
}

fn format_err(id: &str, message: impl Into<String>) -> Error {
    Error::Format {
        id: id.to_string(),
        message: message.into(),
    }
}

pub fn encode_matrix(m: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::InvalidArgument("too many rows".into()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::InvalidArgument("too many cols".into()))?;
    let mut out = Vec::with_capacity(12 + 4 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_matrix(id: &str, bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 12 {
        return Err(format_err(id, "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(id, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = 12 + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(format_err(
            id,
            format!("{rows}x{cols} payload needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(format_err(id, "non-finite value"));
    }
    Matrix::from_vec(rows, cols, data)
}

fn file_name(index: usize, id: &str) -> String {
    let clean: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(64)
        .collect();
    format!("{index:06}_{clean}.egf")
}

pub fn write_features(dir: &Path, features: &BTreeMap<String, Matrix>) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    for (i, (id, m)) in features.iter().enumerate() {
        if !m.is_finite() {
            return Err(Error::InvalidArgument(format!("matrix `{id}` has non-finite entries")));
        }
        let name = file_name(i, id);
        let path = dir.join(&name);
        fs::write(&path, encode_matrix(m)?).map_err(|e| Error::io(&path, e))?;
        files.insert(id.clone(), name);
    }
    let manifest = Manifest {
        format: "EGF1".into(),
        files,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_features(dir: &Path) -> Result<BTreeMap<String, Matrix>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if manifest.format != "EGF1" {
        return Err(format_err(MANIFEST, format!("unknown format `{}`", manifest.format)));
    }
    let mut out = BTreeMap::new();
    for (id, name) in &manifest.files {
        let file = dir.join(name);
        let bytes = fs::read(&file).map_err(|_| format_err(id, format!("manifest names missing file `{name}`")))?;
        out.insert(id.clone(), decode_matrix(id, &bytes)?);
    }
    Ok(out)
}
