use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("image position {position} out of range for body of {body_len} tokens (doc {doc_id})")]
    PositionOutOfRange {
        doc_id: String,
        position: usize,
        body_len: usize,
    },

    #[error("index error: {0}")]
    Index(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("caption of {len} tokens exceeds max_len {max_len}")]
    Length { len: usize, max_len: usize },

    #[error("token id {id} out of range for vocabulary of {size}")]
    Vocab { id: usize, size: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI's error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::PositionOutOfRange { .. } => "position_out_of_range",
            Error::Index(_) => "index",
            Error::NotFound(_) => "not_found",
            Error::Format(_) => "format",
            Error::Length { .. } => "length",
            Error::Vocab { .. } => "vocab",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::NonFinite { .. } => "non_finite",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
