use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NcgError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NcgError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("backward called twice without a new forward pass")]
    BackwardTwice,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("batch norm in inference mode has no running statistics yet")]
    Uncalibrated,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("prediction and target ranges do not overlap")]
    EmptyOverlap,

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("{path}: line {line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl NcgError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        NcgError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        NcgError::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NcgError::Io {
            path: path.into(),
            source,
        }
    }
}
