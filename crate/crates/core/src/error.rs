use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::LandmarkName;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("missing landmark `{0}`")]
    MissingLandmark(LandmarkName),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("detector timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("detector rejected credentials (HTTP {0})")]
    AuthFailure(u16),

    #[error("detector found no face")]
    DetectorMiss,

    #[error("detector request failed: {0}")]
    Detector(String),

    #[error("unknown feature tap `{0}`")]
    UnknownTap(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("target fraction infeasible: quantile {0} exceeds 1")]
    InfeasibleTarget(f64),

    #[error("defrontalization model not loaded")]
    ModelNotLoaded,

    #[error("dataset is empty")]
    DataEmpty,

    #[error("non-finite loss `{name}` at step {step}: {value}")]
    NonFiniteLoss { name: String, step: u64, value: f64 },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("augmentation policy has no calibrated threshold")]
    PolicyUncalibrated,

    #[error("failed to embed {path}: {message}")]
    EmbeddingFailure { path: PathBuf, message: String },

    #[error("gallery contains identity `{0}` more than once")]
    DuplicateGalleryIdentity(String),

    #[error("pair {0} has no pose annotation")]
    MissingAnnotation(usize),

    #[error("pipeline `{0}` failed to load")]
    PipelineLoadFailure(String),

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: format!("{actual:?}"),
        }
    }

    /// Whether retrying the same request could succeed.
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Timeout(_) | Error::Detector(_))
    }
}
