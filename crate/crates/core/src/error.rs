//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model configuration or weight shapes.
    #[error("configuration error: {0}")]
    Config(String),

    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A file or archive does not follow its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// An artifact (mask, circuit file, directions) does not match the
    /// graph or model it is applied to.
    #[error("fingerprint mismatch: {0}")]
    Fingerprint(String),

    /// Invalid argument to an operation.
    #[error("argument error: {0}")]
    Argument(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
