use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: String },

    #[error("dimension overflow: {0:?} (each dim must be > 0 and the product <= 2^32)")]
    DimensionOverflow([u64; 3]),

    #[error("truncated file: expected {expected} payload bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },

    #[error("non-finite voxel at index {0}")]
    NonFiniteVoxel(usize),

    #[error("data length {len} does not match dims {dims:?}")]
    LengthMismatch { len: usize, dims: [usize; 3] },

    #[error("invalid preprocessing parameters: {0}")]
    InvalidParams(String),

    #[error("block grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },

    #[error("need {needed} matched slices, found only {found}")]
    NotEnoughSlices { needed: usize, found: usize },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed file {path}: {msg}")]
    Format { path: String, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
