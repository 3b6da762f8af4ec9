use std::path::PathBuf;

use crate::distmath::Space;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty vector")]
    Empty,
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("index space mismatch: {left:?} vs {right:?}")]
    SpaceMismatch { left: Space, right: Space },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("not a probability vector: {0}")]
    NotAProbability(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("empty selection grid")]
    EmptyGrid,
    #[error("unknown layer id {0}")]
    UnknownLayer(u32),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("no step logits recorded for prefix of length {prefix_len}")]
    PrefixNotCovered { prefix_len: usize },
    #[error("at decoding step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("trace format: {0}")]
    Format(String),
    #[error("trace checksum mismatch: header {expected:#010x}, payload {actual:#010x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("unsupported trace format version {0}")]
    Version(u32),
    #[error("io error on {path}: {source}")]
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

    /// Strips any step wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            other => other,
        }
    }
}
