//! Crate-wide error type.

use std::fmt;

/// Errors produced by the library.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible; `detail` reports the shapes.
    ShapeMismatch { op: &'static str, detail: String },
    /// An argument violates an operation's preconditions.
    InvalidInput { op: &'static str, detail: String },
    /// Every key of an attention query row is masked out.
    FullyMaskedRow { query: usize },
    /// A public operation produced a non-finite entry.
    NonFinite { op: &'static str },
    /// A serialized artifact could not be parsed.
    BadFormat { detail: String },
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => {
                write!(f, "{op}: dimension mismatch: {detail}")
            }
            Error::InvalidInput { op, detail } => write!(f, "{op}: invalid input: {detail}"),
            Error::FullyMaskedRow { query } => {
                write!(f, "attention: query row {query} has no unmasked keys")
            }
            Error::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Error::BadFormat { detail } => write!(f, "malformed data: {detail}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::ShapeMismatch {
        op,
        detail: detail.into(),
    })
}

pub(crate) fn input_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput {
        op,
        detail: detail.into(),
    })
}
