// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors produced by `mechuq`.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two operands have incompatible shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A capture (attention matrix, MLP pre-activation) needed by the
    /// operation is not present.
    #[error("missing capture: {0}")]
    MissingCapture(String),

    /// The trace does not carry the data the operation needs (for example a
    /// compressed trace without full step distributions).
    #[error("capability missing: {0}")]
    CapabilityMissing(String),

    /// A statistic is undefined for the given data (constant input, single class).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A serialized artifact could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// True when the error flags a degenerate statistic.
    pub fn is_degenerate(&self) -> bool {
        matches!(self, Error::Degenerate(_))
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
