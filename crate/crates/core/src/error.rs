//! Error type shared by every module in the crate.

use thiserror::Error;

/// Classifies a binary-format failure so callers can distinguish a wrong
/// file from a damaged one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatErrorKind {
    /// Leading magic bytes did not match the expected format.
    BadMagic,
    /// Magic matched but the version is not one this build understands.
    UnsupportedVersion,
    /// Stream ended before the declared payload was complete.
    Truncated,
    /// Structurally invalid content (inconsistent counts, bad tags, ...).
    Corrupt,
}

impl std::fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FormatErrorKind::BadMagic => "bad magic",
            FormatErrorKind::UnsupportedVersion => "unsupported version",
            FormatErrorKind::Truncated => "truncated stream",
            FormatErrorKind::Corrupt => "corrupt content",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {details}")]
    ShapeMismatch { context: String, details: String },

    #[error("invalid argument for {context}: {details}")]
    InvalidArgument { context: String, details: String },

    #[error("degenerate input in {context}: {details}")]
    Degenerate { context: String, details: String },

    #[error("non-finite value in {context}: {details}")]
    NonFinite { context: String, details: String },

    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("{kind} while reading {format}: {details}")]
    Format {
        format: &'static str,
        kind: FormatErrorKind,
        details: String,
    },

    #[error("config error at line {line}: {details}")]
    Config { line: usize, details: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, details: impl Into<String>) -> Self {
        Error::ShapeMismatch { context: context.into(), details: details.into() }
    }

    pub(crate) fn invalid(context: impl Into<String>, details: impl Into<String>) -> Self {
        Error::InvalidArgument { context: context.into(), details: details.into() }
    }

    pub(crate) fn degenerate(context: impl Into<String>, details: impl Into<String>) -> Self {
        Error::Degenerate { context: context.into(), details: details.into() }
    }

    pub(crate) fn non_finite(context: impl Into<String>, details: impl Into<String>) -> Self {
        Error::NonFinite { context: context.into(), details: details.into() }
    }

    pub(crate) fn format(
        format: &'static str,
        kind: FormatErrorKind,
        details: impl Into<String>,
    ) -> Self {
        Error::Format { format, kind, details: details.into() }
    }

    /// Format-error kind, if this is a format error.
    pub fn format_kind(&self) -> Option<FormatErrorKind> {
        match self {
            Error::Format { kind, .. } => Some(*kind),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
