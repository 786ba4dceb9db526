//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation produced a non-finite value (overflow, log of a
    /// non-positive number, ...). Forward passes never propagate NaN silently.
    #[error("{op}: numeric range error: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Out-of-range index (token id, vocabulary position, ...).
    #[error("index error: {0}")]
    Index(String),

    /// Corpus or config file could not be parsed.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Checkpoint file is malformed, truncated, or version-incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Training loss became non-finite.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A parameter gradient was NaN/Inf at optimizer-step time.
    #[error("non-finite gradient for parameter {param}")]
    BadGradient { param: String },
}

pub type Result<T> = std::result::Result<T, Error>;
