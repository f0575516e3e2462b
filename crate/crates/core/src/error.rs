use std::path::PathBuf;

use casam_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged in {context}: {detail}")]
    Diverged { context: String, detail: String },

    #[error("pretrained backbone reached IoU {iou:.3} on held-out samples, below the floor of {floor:.2}")]
    BackboneQuality { iou: f64, floor: f64 },

    #[error("no cached backbone at {0} and pretraining is disabled")]
    MissingBackbone(PathBuf),
}

impl CoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    /// Wraps a non-finite loss from the tape with the place it happened.
    pub(crate) fn diverged(context: impl Into<String>, err: TensorError) -> Self {
        match err {
            TensorError::NonFiniteLoss(v) => Self::Diverged {
                context: context.into(),
                detail: format!("loss became {}", v),
            },
            other => Self::Tensor(other),
        }
    }
}
