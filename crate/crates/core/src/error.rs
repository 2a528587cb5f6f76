use pam_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected}")]
    BadMagic { expected: &'static str },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dtype mismatch: file holds {found}, caller expects {expected}")]
    DtypeMismatch { expected: &'static str, found: String },
    #[error("invalid dimensions or spacing: {0}")]
    InvalidGeometry(String),
    #[error("shape does not fit inside the volume: {0}")]
    OutOfBounds(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("mask has {0} foreground pixels; at least 101 are required")]
    TooFewPixels(usize),
    #[error("no adjacent slices within the propagation thickness")]
    NoAdjacentSlices,
    #[error("empty initial mask")]
    EmptyInitialMask,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid prompt: {0}")]
    Prompt(String),
    #[error("rle: {0}")]
    Rle(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
