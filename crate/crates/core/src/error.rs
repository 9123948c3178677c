use std::path::Path;

/// Broad failure classes, used by the command line to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape { expected: Vec<usize>, actual: Vec<usize> },

    #[error("timestep {t} outside [{min}, {max}]")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },

    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("cannot decode image {path}: {reason}")]
    Image { path: String, reason: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("not enough rows: {0}")]
    InsufficientRows(String),

    #[error("noise cache has no entry for {} row(s): {}", .0.len(), .0.join(", "))]
    MissingCache(Vec<String>),

    #[error("training set contains a single class")]
    SingleClass,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("no positive labels; average precision is undefined")]
    NoPositives,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("network has not been trained")]
    Untrained,

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] anl_nn::CheckpointError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::TimestepOutOfRange { .. } => ErrorKind::Usage,
            Error::NonFinite(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
