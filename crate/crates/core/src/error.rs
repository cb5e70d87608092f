use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("insufficient queries: input {input} has {records} record(s), need at least 2")]
    InsufficientQueries { input: usize, records: usize },

    #[error("no backdoor activation within {horizon} queries")]
    HorizonExhausted { horizon: u64 },

    #[error(transparent)]
    Checkpoint(#[from] crate::network::CheckpointError),

    #[error(transparent)]
    Idx(#[from] crate::data::IdxError),

    #[error("fixture parse error at line {line}: {msg}")]
    Fixture { line: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
