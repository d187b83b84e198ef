//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by field construction, file formats, and numerical
/// routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Two grids that must agree in shape do not.
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    /// A sequence must contain at least one frame.
    #[error("sequence has no frames")]
    EmptySequence,

    /// A stored file violates its format; `offset` is the byte where the
    /// violation was detected.
    #[error("format error at byte {offset}: {what}")]
    Format { offset: u64, what: String },

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A configuration value is outside its documented range.
    #[error("invalid configuration: {what}")]
    Config { what: String },

    /// A dataset, split, or input does not satisfy an operation's
    /// preconditions.
    #[error("invalid data: {what}")]
    Data { what: String },

    /// A manifest line could not be parsed.
    #[error("manifest line {line}: {what}")]
    Manifest { line: usize, what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(what: impl Into<String>) -> Self {
        Error::Config { what: what.into() }
    }

    pub(crate) fn data(what: impl Into<String>) -> Self {
        Error::Data { what: what.into() }
    }

    pub(crate) fn format(offset: u64, what: impl Into<String>) -> Self {
        Error::Format {
            offset,
            what: what.into(),
        }
    }
}
