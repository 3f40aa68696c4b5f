//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is missing, unknown, or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Input data violates a precondition (empty batch, short waveform, ...).
    #[error("input error: {0}")]
    Input(String),

    /// An internal caller broke an API contract (non-scalar loss, layer index
    /// mismatch, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed weights container.
    #[error("format error at offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// An identifier could not be resolved.
    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
