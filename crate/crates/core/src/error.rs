use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image too small: {width}x{height}, need at least {min}x{min}")]
    ImageTooSmall { width: usize, height: usize, min: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("divergence detected: non-finite gradient at parameter {index}")]
    Divergence { index: usize },

    #[error("empty support mask")]
    EmptySupportMask,

    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    #[error("empty queue")]
    EmptyQueue,

    #[error("key embedding is not unit norm (norm {norm})")]
    NotNormalized { norm: f32 },

    #[error("not enough images for class {class}: have {available}, need {needed}")]
    InsufficientImages { class: usize, available: usize, needed: usize },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

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
        source: ::image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParam { name, reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
