use std::path::PathBuf;

use memrouter_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite {what}")]
    NonFinite { what: String },

    #[error("token id {id} at position {position} is outside the vocabulary of {vocab}")]
    UnknownToken { id: usize, position: usize, vocab: usize },

    #[error("sequence of length {len} does not fit the context ({max})")]
    SequenceLength { len: usize, max: usize },

    #[error("routing plan has no directive for layer {layer}, position {position}")]
    PlanCoverage { layer: usize, position: usize },

    #[error("{what}: expected {expected}, found {found}")]
    Mismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{path} is truncated: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("malformed {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("{0}")]
    Invalid(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn mismatch(what: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::Mismatch {
            what: what.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
