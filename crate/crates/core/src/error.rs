use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown {kind} token(s): {tokens}")]
    UnknownToken { kind: &'static str, tokens: String },

    #[error("empty dataset: every travel record was filtered out")]
    EmptyDataset,

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("ODE integration failed at t={t}: {reason}")]
    Integration { t: f64, reason: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: static={l_s}, dynamic={l_d}, rec={l_r}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        l_s: f64,
        l_d: f64,
        l_r: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config hash mismatch: checkpoint {expected}, current {found}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
