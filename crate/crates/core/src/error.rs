use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("layout mismatch: {0}")]
    Layout(String),

    #[error("backward already ran on this tape; build a new tape before differentiating again")]
    DoubleBackward,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("missing artifact {}: run `{producer}` first", path.display())]
    MissingArtifact {
        path: PathBuf,
        producer: &'static str,
    },

    #[error("hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::HashMismatch { .. } => 2,
            Error::MissingArtifact { .. } => 3,
            Error::Numeric { .. } => 4,
            _ => 1,
        }
    }
}
