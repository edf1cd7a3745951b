use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("stale tape: network changed since the forward pass")]
    StaleTape,

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("undefined relevance: both staining patterns are empty")]
    UndefinedRelevance,

    #[error("stratification failed: {0}")]
    Stratification(String),

    #[error("scale alignment: {0}")]
    Alignment(String),

    #[error("retrieval input: {0}")]
    RetrievalInput(String),

    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("bad magic in {0}")]
    BadMagic(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated data: {0}")]
    Truncated(String),

    #[error("checksum mismatch: {0}")]
    Checksum(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// I/O failure annotated with the offending path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence(_) => 3,
            Error::Incompatible(_) | Error::Version { .. } => 4,
            Error::Io { .. }
            | Error::BadMagic(_)
            | Error::Truncated(_)
            | Error::Checksum(_)
            | Error::Malformed(_) => 5,
            _ => 2,
        }
    }
}
