use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value in {op}")]
    Numeric { op: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("token error: {0}")]
    Token(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },
    #[error("checkpoint error{}: {msg}", array.as_ref().map(|a| format!(" in array '{a}'")).unwrap_or_default())]
    Checkpoint { array: Option<String>, msg: String },
    #[error("unknown motion class '{0}'")]
    UnknownClass(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {what}: {msg}")]
    Parse { what: String, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(op: impl Into<String>) -> Self {
        Error::Numeric { op: op.into() }
    }
}
