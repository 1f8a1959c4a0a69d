use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input size {height}x{width} is not usable: {reason}; pad or resize the image first")]
    InputSize { height: usize, width: usize, reason: String },

    #[error("weight archive: {0}")]
    Archive(String),

    #[error("checkpoint refused: {0}")]
    CheckpointMismatch(String),

    #[error("feature map {height}x{width} has no interior anchors (needs at least 3x3)")]
    NoInteriorAnchors { height: usize, width: usize },

    #[error("contrastive loss needs at least 2 difference vectors, got {0}")]
    TooFewVectors(usize),

    #[error("missing feature layer `{0}`")]
    MissingLayer(String),

    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: usize, breakdown: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("inconsistent frame sizes: {0}")]
    FrameSizes(String),

    #[error("flow file {path}: {reason}")]
    Flow { path: PathBuf, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("external tool: {0}")]
    External(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
