use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible with the operation.
    #[error("dimension error: {0}")]
    Shape(String),
    /// A precondition of an operation was violated.
    #[error("contract error: {0}")]
    Contract(String),
    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),
    /// A forward result contained NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    /// Scene directory could not be ingested.
    #[error("ingestion error in {path}: {msg}")]
    Ingest { path: PathBuf, msg: String },
    /// Malformed checkpoint or checkpoint I/O failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn ingest_err(path: impl Into<PathBuf>, msg: impl Into<String>) -> Error {
    Error::Ingest { path: path.into(), msg: msg.into() }
}
