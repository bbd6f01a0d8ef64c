use std::fmt;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: index {index} out of bounds: {detail}")]
    OutOfBounds {
        op: &'static str,
        index: usize,
        detail: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl fmt::Display) -> Self {
        Error::Shape {
            op,
            detail: detail.to_string(),
        }
    }

    pub(crate) fn invalid(detail: impl fmt::Display) -> Self {
        Error::InvalidArgument(detail.to_string())
    }

    pub(crate) fn format(offset: u64, detail: impl fmt::Display) -> Self {
        Error::Format {
            offset,
            detail: detail.to_string(),
        }
    }

    /// True for errors caused by malformed or unreadable files.
    pub fn is_format_error(&self) -> bool {
        matches!(self, Error::Format { .. } | Error::Version { .. } | Error::Io(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
