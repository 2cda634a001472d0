use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
