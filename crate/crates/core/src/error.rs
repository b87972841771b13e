use std::io;

use thiserror::Error;

pub type Result<T, E = AmtError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AmtError {
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("unsupported version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {}", .0.join("; "))]
    ShapeMismatch(Vec<String>),

    #[error("non-finite value in batch {batch}: {message}")]
    NonFinite { batch: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl AmtError {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        AmtError::Parse {
            line,
            message: message.into(),
        }
    }

    /// True for errors caused by the filesystem rather than by bad input.
    pub fn is_io(&self) -> bool {
        matches!(self, AmtError::Io(_))
    }
}
