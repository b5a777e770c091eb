//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor operation received incompatible shapes. Names the operation
    /// and the offending dimensions.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An operation produced NaN or Inf.
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    /// A label outside the known class range.
    #[error("invalid label {label} ({classes} classes known)")]
    InvalidLabel { label: usize, classes: usize },

    /// Precondition violation that is not a shape problem.
    #[error("{0}")]
    InvalidArgument(String),

    /// Malformed on-disk data (dataset records, checkpoints, split files).
    #[error("format error: {0}")]
    Format(String),

    /// Configuration file problem, with key/line diagnostics.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
