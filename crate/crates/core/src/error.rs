use std::path::PathBuf;

use thiserror::Error;

use crate::script::Diagnostic;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("invalid script: {}", join_diagnostics(.0))]
    Validation(Vec<Diagnostic>),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("backbone contract violated: {0}")]
    Contract(String),

    #[error("segment {index} failed: {source}")]
    Segment {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 1 validation/config, 2 I/O, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Validation(_) | Error::Config { .. } => 1,
            Error::Argument(_) => 1,
            Error::Io { .. } => 2,
            Error::Transport(_) | Error::Protocol(_) | Error::Contract(_) => 3,
            Error::Segment { .. } => 3,
        }
    }
}

fn join_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
