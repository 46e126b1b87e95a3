use thiserror::Error;

/// Errors surfaced by the toolkit.
#[derive(Error, Debug)]
pub enum KrError {
    /// Incompatible tensor shapes or invalid geometry for an operation.
    #[error("dimension error: {0}")]
    Dim(String),

    /// An operation was called outside its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid input values (e.g. non-normalized teacher distributions).
    #[error("validation error: {0}")]
    Validation(String),

    /// Inconsistent network or run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Teacher layers cannot be partitioned as requested.
    #[error("planning error: {0}")]
    Plan(String),

    /// Corrupt or unrecognized file contents.
    #[error("format error: {0}")]
    Format(String),

    /// A forward or backward pass produced NaN or Inf.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KrError>;
