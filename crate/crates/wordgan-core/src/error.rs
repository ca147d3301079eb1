use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Shape or dimension disagreement between operands.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A precondition on an argument failed (bad extent, empty input, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation on finite inputs produced NaN or Inf, or a non-finite
    /// value was handed in where the contract requires finite elements.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed input file (embeddings, config, captions, ...).
    #[error("parse error: {0}")]
    Parse(String),

    /// Checkpoint file is corrupt, truncated, or not a checkpoint at all.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset directory or record level problem.
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
