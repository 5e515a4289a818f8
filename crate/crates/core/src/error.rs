//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PtaError>;

#[derive(Debug, Error)]
pub enum PtaError {
    /// A caller-supplied value violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration file or config object failed validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Shapes of two tensors/vectors that must agree do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A referenced modality, parameter, or file entry does not exist.
    #[error("not found: {0}")]
    NotFound(String),

    /// A numeric invariant broke (NaN/Inf loss, non-finite gradient, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A stored artifact (dataset, checkpoint, report) is malformed.
    #[error("corrupt artifact: {0}")]
    CorruptArtifact(String),

    /// A chart backend failed to draw or flush.
    #[error("render error: {0}")]
    Render(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PtaError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        PtaError::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        PtaError::InvalidConfig(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        PtaError::ShapeMismatch(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        PtaError::Numeric(msg.into())
    }
}
