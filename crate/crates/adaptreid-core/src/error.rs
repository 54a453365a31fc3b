use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Configuration rejected before any work started.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset generation, loading or splitting failed.
    #[error("data error: {0}")]
    Data(String),

    /// Tensor shape disagreement between an operation and its inputs.
    #[error("shape error: {0}")]
    Shape(String),

    /// A loss term became non-finite; training must not continue silently.
    #[error("numeric abort: loss term `{term}` is non-finite ({value})")]
    NonFinite { term: String, value: f64 },

    /// Checkpoint container could not be decoded.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    CheckpointVersion { expected: u32, found: u32 },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: config, data and numeric failures get
    /// distinct codes so scripted runs can tell them apart.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::NonFinite { .. } => 4,
            _ => 1,
        }
    }
}
