use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged in {stage} at epoch {epoch}: {detail}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        detail: String,
    },

    #[error("activation tape was recorded against parameter version {recorded}, parameters are now at version {current}")]
    StaleTape { recorded: u64, current: u64 },

    #[error("bad checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
