use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Binary container could not be decoded. `id` names the offending entry.
    #[error("format error in `{id}`: {message}")]
    Format { id: String, message: String },

    /// JSON document violates the expected schema; `path` is a JSON pointer-ish location.
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },

    #[error("validation error for query `{query_id}`: {message}")]
    Validation { query_id: String, message: String },

    #[error("no positive anchors; boundary loss is undefined")]
    NoPositives,

    #[error("training diverged at step {step}: {message}")]
    Divergence { step: u64, message: String },

    #[error("channel `{channel}` is misaligned: {message}")]
    Alignment { channel: String, message: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::OutOfRange(_)
                | Error::Parse { .. }
                | Error::Validation { .. }
                | Error::Input(_)
                | Error::Alignment { .. }
        )
    }
}
