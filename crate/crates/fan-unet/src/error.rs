use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by tensor primitives.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: dimension {dim} out of range for rank {rank}")]
    DimOutOfRange { op: &'static str, dim: usize, rank: usize },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("log: non-positive value {value} at flat index {index}")]
    LogDomain { index: usize, value: f64 },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

/// Crate-level error covering configuration, data and training failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration: {0}")]
    Config(String),

    #[error("ingestion of {path}: {msg}")]
    Ingestion { path: PathBuf, msg: String },

    #[error("image/mask pairing: {0}")]
    Pairing(String),

    #[error("validation: {0}")]
    Validation(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// CLI contract: 1 for validation failures, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Validation(_)
            | Error::Pairing(_)
            | Error::Ingestion { .. }
            | Error::Tensor(_) => 1,
            Error::Checkpoint(_) | Error::Diverged(_) | Error::Io(_) | Error::Image(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
