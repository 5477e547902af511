use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("magnification {magnification} has proportion {proportion} but no tiles")]
    InsufficientTiles { magnification: String, proportion: f64 },

    #[error("invalid tile size {size}: must be at least {min}")]
    InvalidSize { size: u32, min: u32 },

    #[error("invalid crop {0}")]
    InvalidCrop(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("teacher unavailable: {0}")]
    TeacherUnavailable(String),

    #[error("unknown key: {0}")]
    Key(String),

    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: u64, breakdown: String },

    #[error("checkpoint has no EMA shadow parameters")]
    MissingEma,

    #[error("checkpoint has no distillation heads")]
    MissingHeads,

    #[error("invalid k={k} for {available} candidates")]
    InvalidK { k: usize, available: usize },

    #[error("invalid prefix dimension {dim} (embedding width {width})")]
    InvalidDim { dim: usize, width: usize },

    #[error("training labels contain a single class")]
    DegenerateLabels,

    #[error("missing labels: {0}")]
    MissingLabels(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(PathBuf),

    #[error("manifest parse error at line {line}: {message}")]
    ManifestParse { line: usize, message: String },

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
