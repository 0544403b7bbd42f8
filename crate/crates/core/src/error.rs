//! Error taxonomy shared across the crate.
//!
//! Variants map onto the CLI exit codes: `Usage` to 1, `Data` to 2,
//! `Numerical` to 3. Everything else is an internal contract violation
//! and also exits with 1.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Tensor shapes do not line up.
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    /// A NaN or infinity surfaced where a finite value is required.
    #[error("non-finite value: {0}")]
    Numerical(String),

    /// Malformed input data (CSV rows, checkpoints, config files).
    #[error("data error: {0}")]
    Data(String),

    /// Bad command-line usage outside what clap validates.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape { expected: expected.into(), got: got.into() }
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    /// Process exit code for the CLI layer.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Data(_) => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
