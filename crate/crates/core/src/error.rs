use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{}: {message}", path.display())]
    DataFile { path: PathBuf, message: String },

    #[error("checkpoint not found: {}", .0.display())]
    CheckpointNotFound(PathBuf),

    #[error("incompatible checkpoint: {0}")]
    CheckpointIncompatible(String),

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("non-finite training state: {0}")]
    Unstable(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable, machine-parseable category used by the command line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config-invalid",
            Error::Argument(_) => "argument-invalid",
            Error::Domain(_) => "domain-error",
            Error::Shape(_) => "input-shape-mismatch",
            Error::Data(_) | Error::DataFile { .. } | Error::Image(_) => "data-error",
            Error::CheckpointNotFound(_) => "checkpoint-not-found",
            Error::CheckpointIncompatible(_) => "checkpoint-incompatible",
            Error::CheckpointCorrupt(_) => "checkpoint-corrupt",
            Error::Unstable(_) => "training-unstable",
            Error::Tensor(_) => "backend-error",
            Error::Io(_) => "io-error",
            Error::Json(_) => "format-error",
        }
    }

    pub(crate) fn data_file(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::DataFile {
            path: path.into(),
            message: message.into(),
        }
    }
}
