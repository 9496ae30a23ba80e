use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("non-finite value produced by {node}")]
    NonFinite { node: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class coverage: {0}")]
    Coverage(String),

    #[error("training diverged ({component}) at step {step} with seed {seed}")]
    Divergence {
        component: String,
        step: usize,
        seed: u64,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
