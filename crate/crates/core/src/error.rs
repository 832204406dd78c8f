use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("tape: {0}")]
    Tape(&'static str),

    #[error("non-finite loss at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("format error in {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("record {index}: {detail}")]
    Record { index: usize, detail: String },

    #[error("checkpoint config digest mismatch (file {found}, config {expected})")]
    Digest { expected: String, found: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configs, files, arguments)
    /// rather than by a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Format { .. }
                | Error::Record { .. }
                | Error::Digest { .. }
                | Error::Config(_)
                | Error::Shape { .. }
        )
    }
}
