//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A lookup (e.g. a timestamp) falls outside the valid domain.
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// A file failed to parse; `record` is the 1-based index of the
    /// offending record (0 for header problems).
    #[error("parse error at record {record}: {message}")]
    Parse { record: usize, message: String },

    /// A gradient buffer contained a NaN or infinity.
    #[error("non-finite gradient in parameter group '{group}'")]
    NonFiniteGradient { group: &'static str },

    /// Training loss became non-finite; the trainer dumps state before
    /// surfacing this.
    #[error("training diverged at iteration {iteration}: {message}")]
    Diverged { iteration: u64, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
