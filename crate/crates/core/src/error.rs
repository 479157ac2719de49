//! Error type shared by every module in the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error enum. The variant decides the CLI exit code:
/// config/validation problems map to exit 1, everything else to exit 2.
#[derive(Debug)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    Dim(String),
    /// A caller violated an operation's contract.
    Contract(String),
    /// Invalid configuration value.
    Config(String),
    /// Invalid input document or dataset definition.
    Validation(String),
    /// Training could not proceed (e.g. empty corpus for a class).
    Train(String),
    /// Augmentation policy references an unknown operation.
    Policy(String),
    /// Malformed binary file; `offset` is the byte position of the problem.
    Format { offset: u64, reason: String },
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Validation(_))
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(msg) => write!(f, "dimension error: {msg}"),
            Error::Contract(msg) => write!(f, "contract error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Train(msg) => write!(f, "training error: {msg}"),
            Error::Policy(msg) => write!(f, "policy error: {msg}"),
            Error::Format { offset, reason } => {
                write!(f, "format error at byte {offset}: {reason}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
