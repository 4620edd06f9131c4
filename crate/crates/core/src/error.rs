use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("partition plan: {0}")]
    Plan(String),

    #[error("matching failed for partition {partition}: {reason}")]
    Matching { partition: usize, reason: String },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("validation: {0}")]
    Validation(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// Short machine-readable category used by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Argument(_) | Error::Plan(_) | Error::Unsupported(_) => "argument",
            Error::Numeric(_) | Error::Solver(_) | Error::Matching { .. } => "solver",
            Error::Parse { .. } | Error::Validation(_) => "parse",
            Error::Io { .. } => "io",
        }
    }
}
