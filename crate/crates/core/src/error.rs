use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical abort at step {step}: non-finite value first seen in {location}")]
    NumericalAbort { step: usize, location: String },

    #[error("{path}: unexpected end of file at byte {offset}")]
    UnexpectedEof { path: PathBuf, offset: usize },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: checkpoint version mismatch (found magic {found:?})")]
    Version { path: PathBuf, found: String },

    #[error("{path}: CRC mismatch (stored {stored:08x}, computed {computed:08x})")]
    Crc {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
