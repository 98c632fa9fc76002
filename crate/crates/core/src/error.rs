use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument was outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Configuration values are inconsistent or out of range.
    #[error("configuration error: {0}")]
    Config(String),

    /// Two tensors that must agree in shape do not.
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// A video or tensor file could not be read.
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    /// A checkpoint was truncated, corrupt or written by an incompatible version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A split request cannot be satisfied by the dataset.
    #[error("infeasible split: {0}")]
    Split(String),

    /// The training loop produced a non-finite loss.
    #[error("non-finite loss at step {step} (batch ids: {ids:?})")]
    NonFinite { step: u64, ids: Vec<u64> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
