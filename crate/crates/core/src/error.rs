//! Crate-wide error type.
//!
//! Variants are grouped by failure class so callers (notably the CLI) can map
//! them onto distinct exit codes: invalid configuration, shape disagreements,
//! dataset/file problems, checkpoint decoding problems, and numerical failures.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument or configuration (bad hyperparameter, unknown name,
    /// an input size a model cannot accept, ...).
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Tensor or layer shape disagreement.
    #[error("shape error: {0}")]
    Shape(String),

    /// Dataset layout or image decoding problem.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint file cannot be decoded or does not match its architecture.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Non-finite values or other numerical failure.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Prefixes the message with the layer the failure occurred in.
    pub(crate) fn in_layer(self, name: &str) -> Error {
        match self {
            Error::Invalid(m) => Error::Invalid(format!("layer `{name}`: {m}")),
            Error::Shape(m) => Error::Shape(format!("layer `{name}`: {m}")),
            Error::Data(m) => Error::Data(format!("layer `{name}`: {m}")),
            Error::Checkpoint(m) => Error::Checkpoint(format!("layer `{name}`: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("layer `{name}`: {m}")),
            Error::Io(e) => Error::Io(e),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
