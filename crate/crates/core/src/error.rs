use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("duplicate concept text {text:?} on lines {lines:?}")]
    Duplicate { text: String, lines: Vec<usize> },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: usize,
        reason: String,
        last_good: Box<crate::trainer::MapPair>,
    },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("incomplete annotations for class {class:?}: missing {missing:?}")]
    IncompleteAnnotation { class: String, missing: Vec<String> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid json: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics (divergence, singular systems)
    /// rather than bad input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_) | Error::NonFinite(_) | Error::Diverged { .. }
        )
    }
}
