use std::path::PathBuf;

use crate::geometry::Space;

pub type Result<T> = std::result::Result<T, Error>;

/// Failures while ingesting an on-disk sequence. Each variant is a distinct code.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("missing groundtruth file: {0}")]
    MissingGroundtruth(PathBuf),
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("non-contiguous frame indices in {dir}: expected {expected:04}, found {found:04}")]
    NonContiguous {
        dir: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("malformed annotation at {path}:{line}: {reason}")]
    BadAnnotation {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("no frames in {0}")]
    Empty(PathBuf),
    #[error("annotation count {annotations} does not match frame count {frames}")]
    AnnotationCount { annotations: usize, frames: usize },
}

impl DataError {
    pub fn code(&self) -> &'static str {
        match self {
            DataError::MissingGroundtruth(_) => "E_MISSING_GT",
            DataError::UnreadableImage { .. } => "E_BAD_IMAGE",
            DataError::NonContiguous { .. } => "E_NON_CONTIGUOUS",
            DataError::BadAnnotation { .. } => "E_BAD_ANNOTATION",
            DataError::Empty(_) => "E_EMPTY",
            DataError::AnnotationCount { .. } => "E_ANNOTATION_COUNT",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("coordinate space mismatch: {0:?} vs {1:?}")]
    SpaceMismatch(Space, Space),
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("data error [{code}]: {0}", code = .0.code())]
    Data(#[from] DataError),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidArgument(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Checkpoint(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
