use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for grid of {len} pixels")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("grid mismatch: expected {expected:?}, found {found:?}")]
    GridMismatch { expected: Vec<usize>, found: Vec<usize> },

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("dimension mismatch: expected d={expected}, found d={found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss, first produced by primitive `{0}`")]
    NonFiniteLoss(&'static str),

    #[error("instance too large for dense oracle: N = {0} (limit 4096)")]
    TooLarge(usize),

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("malformed data in {path}: {reason}")]
    MalformedData { path: PathBuf, reason: String },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
