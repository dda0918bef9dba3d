use std::path::PathBuf;

use cisod_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("QP {qp} is not in the configured level set {levels:?}")]
    UnsupportedQp { qp: u8, levels: Vec<u8> },
    #[error("codec backend unavailable: {0}")]
    BackendMissing(String),
    #[error("external codec failed: {0}")]
    ExternalCodec(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing ground truth for ids: {}", .0.join(", "))]
    MissingGroundTruth(Vec<String>),
    #[error("failed to load sample `{id}`: {reason}")]
    Load { id: String, reason: String },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("incompatible checkpoint, mismatched keys: {}", .0.join(", "))]
    IncompatibleCheckpoint(Vec<String>),
    #[error("non-finite loss at step {step} (batch ids: {})", .batch_ids.join(", "))]
    NonFiniteLoss { step: usize, batch_ids: Vec<String> },
    #[error("report error: {0}")]
    Report(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
