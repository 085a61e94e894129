use std::path::PathBuf;

use put_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config mismatch for {key}: expected {expected}, found {found}")]
    ConfigMismatch {
        key: String,
        expected: String,
        found: String,
    },
    #[error("token {token} out of range (limit {limit})")]
    TokenOutOfRange { token: usize, limit: usize },
    #[error("codebook is empty")]
    EmptyCodebook,
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid condition map: {0}")]
    InvalidCondition(String),
    #[error("image format: {0}")]
    Format(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("mask generation: {0}")]
    MaskGeneration(String),
    #[error("degenerate distribution: {0}")]
    Degenerate(String),
    #[error("size mismatch: expected {expected}, found {found}")]
    SizeMismatch { expected: String, found: String },
    #[error("sampling session already complete")]
    SessionComplete,
    #[error("{0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable identifier, used as a machine-parsable error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(TensorError::NumericFault { .. }) => "numeric-fault",
            Error::Tensor(_) => "shape",
            Error::Config(_) => "config",
            Error::ConfigMismatch { .. } => "config-mismatch",
            Error::TokenOutOfRange { .. } => "token-range",
            Error::EmptyCodebook => "empty-codebook",
            Error::InvalidMask(_) => "invalid-mask",
            Error::InvalidCondition(_) => "invalid-condition",
            Error::Format(_) => "format",
            Error::Checkpoint(_) => "checkpoint",
            Error::MaskGeneration(_) => "mask-generation",
            Error::Degenerate(_) => "degenerate",
            Error::SizeMismatch { .. } => "size-mismatch",
            Error::SessionComplete => "session-complete",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
