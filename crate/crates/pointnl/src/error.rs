//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition (bad sizes, shape
    /// mismatches, non-positive cell sizes, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An input is structurally valid but empty where content is required
    /// (zero neighbors, superpoints without centroids, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A text artifact (cloud file, config file) failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A binary artifact (checkpoint) is malformed or does not match the
    /// expected parameter shapes.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Configuration is syntactically fine but semantically unusable.
    #[error("config error: {0}")]
    Config(String),

    /// The bench harness measured an interaction count that disagrees with
    /// the analytic formula.
    #[error("bench assertion failed: {0}")]
    BenchAssertion(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateInput(msg.into())
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
