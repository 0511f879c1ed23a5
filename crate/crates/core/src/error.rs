//! Error type shared across the workspace.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not conform for a tensor operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid configuration (bad key, bad value, incompatible settings).
    #[error("configuration error: {0}")]
    Config(String),

    /// Class vocabulary problems: unknown labels, zero-norm word vectors.
    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    /// A text input failed to parse; names the file and line.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Malformed or missing data (files, batches, codes).
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure during optimization (non-finite loss or gradient).
    #[error("training error: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code convention: 1 usage (handled by the CLI), 2 data
    /// or configuration errors, 3 numeric failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Training(_) => 3,
            _ => 2,
        }
    }
}
