use std::path::PathBuf;

use thiserror::Error;

use crate::model::ParamStore;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite gradient in tensor `{tensor}`")]
    NonFiniteGradient { tensor: String },

    #[error("training diverged at iteration {iteration} (loss is not finite)")]
    Diverged {
        iteration: usize,
        last_good: Box<ParamStore>,
    },

    #[error("could not place {requested} heads after {attempts} attempts; try a smaller count")]
    Placement { requested: usize, attempts: usize },

    #[error("{path}: JSON parse error at byte {offset}: {source}")]
    Json {
        path: PathBuf,
        offset: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes format errors with the file they came from.
    pub(crate) fn in_file(self, path: &std::path::Path) -> Self {
        match self {
            Error::Format { offset, message } => Error::Format {
                offset,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        }
    }

    /// Process exit code used by the `ldc` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteGradient { .. } | Error::Diverged { .. } => 3,
            Error::Io { .. } => 4,
            _ => 2,
        }
    }
}
