use std::path::PathBuf;

use thiserror::Error;

use crate::fader::TrainHistory;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed container or table contents; `what` names the offending field.
    #[error("format error in {path}: {what}")]
    Format { path: PathBuf, what: String },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Value outside its documented domain (bad label, non-one-hot attribute, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite loss during training; the partial history up to the failing
    /// step is attached for post-mortem.
    #[error("training diverged at step {step}: {what}")]
    Diverged {
        step: usize,
        what: String,
        history: Box<TrainHistory>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, what: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            what: what.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
