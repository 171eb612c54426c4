//! Workflow-level errors.
//!
//! Shape and contract violations inside the math core panic with descriptive
//! messages (they are programming errors); everything a user can trigger from
//! the outside — bad config values, missing files, malformed data — comes
//! back as an [`Error`] so the CLI can map it to its exit-code contract.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// A configuration field failed validation; `field` names it.
    Config { field: String, message: String },
    /// A required input file does not exist.
    MissingFile { path: String },
    /// I/O failure other than a missing file.
    Io { path: String, message: String },
    /// Malformed file contents (dataset, checkpoint, input lines).
    Format { message: String },
    /// Training aborted (NaN loss/gradient and similar).
    Train { message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub fn format(message: impl Into<String>) -> Self {
        Error::Format { message: message.into() }
    }

    pub fn train(message: impl Into<String>) -> Self {
        Error::Train { message: message.into() }
    }

    pub fn io(path: &std::path::Path, err: &std::io::Error) -> Self {
        if err.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile { path: path.display().to_string() }
        } else {
            Error::Io { path: path.display().to_string(), message: err.to_string() }
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config { field, message } => write!(f, "config error: {}: {}", field, message),
            Error::MissingFile { path } => write!(f, "missing file: {}", path),
            Error::Io { path, message } => write!(f, "io error: {}: {}", path, message),
            Error::Format { message } => write!(f, "format error: {}", message),
            Error::Train { message } => write!(f, "training aborted: {}", message),
        }
    }
}

impl std::error::Error for Error {}
