use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    #[error("degenerate channel {channel}: {reason}")]
    DegenerateChannel { channel: usize, reason: String },

    #[error("window out of bounds: {0}")]
    OutOfBounds(String),

    #[error("unknown subject index {0}")]
    UnknownSubject(usize),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("split access violation: {0}")]
    SplitAccess(String),

    #[error("{0}")]
    State(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            arg,
            reason: reason.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parseable category used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument { .. } => "invalid-argument",
            Error::NonFinite { .. } => "non-finite",
            Error::DegenerateChannel { .. } => "degenerate-channel",
            Error::OutOfBounds(_) => "out-of-bounds",
            Error::UnknownSubject(_) => "unknown-subject",
            Error::Format { .. } | Error::Csv(_) | Error::Wav(_) | Error::Json(_) => "format",
            Error::Config { .. } => "config",
            Error::SplitAccess(_) => "split-access",
            Error::State(_) => "state",
            Error::Io { .. } => "io",
        }
    }
}
