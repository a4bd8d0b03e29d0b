use std::path::PathBuf;

use icm_core::{CodecError, CodingError, TrainError};

/// Anything the pipeline can fail with; every variant renders as a
/// single human-readable line and a stable machine kind.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image: {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
    #[error("bitstream: {0}")]
    Coding(#[from] CodingError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable category tag for the machine-readable stderr line.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Io { .. } => "io",
            PipelineError::Image { .. } => "image",
            PipelineError::Config(_) => "config",
            PipelineError::Dataset(_) => "dataset",
            PipelineError::Checkpoint(_) => "checkpoint",
            PipelineError::Codec(_) => "codec",
            PipelineError::Coding(_) => "bitstream",
            PipelineError::Train(_) => "training",
            PipelineError::Json(_) => "serialization",
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
