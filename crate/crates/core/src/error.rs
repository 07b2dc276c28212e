use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    /// An extent did not match what the operation requires.
    #[error("{op}: dimension mismatch on axis `{axis}`: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{op}: expected rank {expected}, found shape {found:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        found: Vec<usize>,
    },

    #[error("shape {shape:?} holds {expected} elements but {found} were supplied")]
    Length {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(
        "checkpoint config mismatch on key `{key}`: expected {expected}, checkpoint has {found}"
    )]
    ConfigMismatch {
        key: String,
        expected: String,
        found: String,
    },

    #[error("gradient missing for trainable parameter `{0}`")]
    MissingGrad(String),

    #[error("non-finite loss at iteration {iter} (lr {lr:e})")]
    NonFiniteLoss { iter: usize, lr: f64 },

    #[error(
        "non-deterministic objective: two evaluations at the same point gave {first} and {second}"
    )]
    NonDeterministic { first: f64, second: f64 },

    #[error("format error in {what}: {msg}")]
    Format { what: String, msg: String },

    #[error("{path}: {msg}")]
    Path { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn format(what: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            msg: msg.into(),
        }
    }
}
