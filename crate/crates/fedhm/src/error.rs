//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor math, model construction, data loading,
/// the federated protocol, and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not compose.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value left the finite range (NaN or infinity).
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Operation called in an invalid order (e.g. backward before forward).
    #[error("state error: {0}")]
    State(String),

    /// Invalid argument outside shape concerns (ranks, ratios, labels).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration field failed validation.
    #[error("config error: field `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// A data file could not be decoded.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// Dataset-level problems (empty splits, label range).
    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}
