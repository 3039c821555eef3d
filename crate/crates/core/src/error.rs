//! Error type shared across the crate.

use std::fmt;

/// Unified error for validation, configuration, data and numeric failures.
#[derive(Debug)]
pub enum PapError {
    /// Invalid input values or inconsistent shapes.
    Validation(String),
    /// Invalid or contradictory configuration.
    Config(String),
    /// Dataset or checkpoint problems (missing classes, missing files).
    Data(String),
    /// Persistence format problems (version, checksum, layout).
    Format(String),
    /// Numeric failure (non-finite loss) with context.
    Numeric(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, PapError>;

impl fmt::Display for PapError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PapError::Validation(msg) => write!(f, "validation error: {msg}"),
            PapError::Config(msg) => write!(f, "config error: {msg}"),
            PapError::Data(msg) => write!(f, "data error: {msg}"),
            PapError::Format(msg) => write!(f, "format error: {msg}"),
            PapError::Numeric(msg) => write!(f, "numeric error: {msg}"),
            PapError::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for PapError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            PapError::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for PapError {
    fn from(err: std::io::Error) -> Self {
        PapError::Io(err)
    }
}

impl From<serde_json::Error> for PapError {
    fn from(err: serde_json::Error) -> Self {
        PapError::Format(err.to_string())
    }
}
