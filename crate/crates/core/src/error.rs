use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure modes of the IDX container decoder.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdxError {
    #[error("buffer of {0} bytes is too short for an IDX header")]
    TooShort(usize),
    #[error("bad IDX magic number {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported IDX element type code {0:#04x}")]
    UnsupportedType(u8),
    #[error("IDX payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("IDX payload has {0} trailing bytes")]
    TrailingBytes(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("degenerate target: label smoothing epsilon must be > 0 when log p is evaluated")]
    DegenerateTarget,
    #[error("idx parse error: {0}")]
    Idx(#[from] IdxError),
    #[error("data integrity: {0}")]
    DataIntegrity(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: String, expected: String },
    #[error("checkpoint shape mismatch: {0}")]
    CheckpointShape(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io {
            context: "csv".into(),
            source: io::Error::new(io::ErrorKind::Other, e.to_string()),
        }
    }
}
