//! Crate-wide error type.

use alloc::string::String;
use core::fmt;

/// Errors produced by any public operation in this crate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Operand shapes are inconsistent with the operation's contract.
    ShapeMismatch {
        op: &'static str,
        detail: String,
    },
    /// An operation produced (or was handed) a NaN or infinite value.
    NonFinite {
        op: &'static str,
    },
    /// An argument violates a precondition (bad axis, empty input, ...).
    InvalidArgument {
        op: &'static str,
        detail: String,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::NonFinite { op } => write!(f, "{op}: non-finite value encountered"),
            Error::InvalidArgument { op, detail } => write!(f, "{op}: {detail}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
