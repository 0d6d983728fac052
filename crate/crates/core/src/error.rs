use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("degenerate mask: {0}")]
    DegenerateMask(&'static str),

    #[error("checkpoint version error: {0}")]
    Version(String),

    #[error("backend `{backend}` does not support {what}")]
    Capability { backend: String, what: String },

    #[error("backend `{backend}` failed: {reason}")]
    BackendFailure { backend: String, reason: String },

    #[error("id `{0}` is already registered")]
    DuplicateId(String),

    #[error("unknown {kind} `{id}`; available: {}", available.join(", "))]
    UnknownId {
        kind: &'static str,
        id: String,
        available: Vec<String>,
    },

    #[error("non-finite loss at sample `{sample_id}`")]
    NonFiniteLoss { sample_id: String },

    #[error("unknown denoiser `{0}`")]
    UnknownDenoiser(String),

    #[error("text scorer unavailable: {0}")]
    ScorerUnavailable(String),

    #[error("frame mismatch: {0}")]
    FrameMismatch(String),

    #[error("invalid value: {0}")]
    InvalidArgument(String),

    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("missing artifact: {0}")]
    ArtifactMissing(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    /// Stable process exit code for the CLI: 2 for configuration problems,
    /// 3 for missing or unreadable artifacts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::UnknownId { .. } => 2,
            Error::Version(_) | Error::ArtifactMissing(_) | Error::Decode { .. } => 3,
            _ => 1,
        }
    }
}
