use std::path::PathBuf;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range 1..={len} ({what})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Shape(_)
            | Error::Index { .. }
            | Error::DegenerateGrid(_)
            | Error::Parse { .. } => 2,
            Error::Numeric(_) | Error::Tensor(_) => 3,
            Error::Io { .. } => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
