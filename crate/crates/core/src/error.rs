use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor extent disagrees with what an operation requires.
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {got}")]
    Shape { op: &'static str, dim: String, expected: String, got: String },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// NaN or infinity produced by a forward pass.
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at step {step}")]
    Diverged { step: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, dim: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape { op, dim: dim.into(), expected: expected.to_string(), got: got.to_string() }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format { what, msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
