//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor/layer shape disagreement. The message names the offending
    /// operand (layer index, tensor role) so the caller can locate it.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid argument or API misuse (e.g. backward on a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),

    /// Inconsistent configuration (spec fields that cannot hold together).
    #[error("configuration error: {0}")]
    Config(String),

    /// A NaN/Inf was produced where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Dataset / checkpoint file format violation, with byte offset.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Training diverged; the last good checkpoint is preserved.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Refusal because artifact hashes do not line up.
    #[error("hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
