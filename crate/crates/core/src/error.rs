//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or grid shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A caller-supplied value is outside its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training diverged; carries the last step with a finite loss.
    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },

    /// Metric evaluation could not proceed (empty inputs, no valid pixels).
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Malformed on-disk artifact (bundle, checkpoint, mesh, config).
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn eval(msg: impl Into<String>) -> Self {
        Error::Evaluation(msg.into())
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: msg.into() }
    }
}
