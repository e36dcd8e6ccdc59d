//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Errors are grouped into
//! three coarse classes (validation, runtime, I/O) so the CLI can map them
//! onto stable process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape disagreement or an invalid layer geometry.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value failed validation before any compute ran.
    #[error("config error: {0}")]
    Config(String),

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Dataset contract violation (missing frame, bad manifest, out-of-range pixel...).
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint decode failure or config-digest mismatch.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted (e.g. non-finite loss with batch diagnostics).
    #[error("training error: {0}")]
    Train(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse class used for CLI exit codes: 1 validation, 2 runtime, 3 I/O.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Runtime,
    Io,
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Shape(_) | Error::Config(_) | Error::Data(_) | Error::Checkpoint(_) => {
                ErrorClass::Validation
            }
            Error::NonFinite(_) | Error::Train(_) => ErrorClass::Runtime,
            Error::Io { .. } => ErrorClass::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
