use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid depth {0} (must be positive)")]
    InvalidDepth(f64),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),

    #[error("{}:{line}: {msg}", path.display())]
    Format { path: PathBuf, line: usize, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },

    #[error("time order violation: {0}")]
    TimeOrder(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    Numerical(&'static str),

    #[error("mask covers the entire image")]
    AllMasked,

    #[error("map is empty")]
    EmptyMap,

    #[error("insufficient overlap: {0} associated pairs (need at least 3)")]
    InsufficientOverlap(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("stage `{stage}` failed at t={timestamp:.6}: {source}")]
    Stage {
        stage: &'static str,
        timestamp: f64,
        #[source]
        source: Box<Error>,
    },
}

/// Broad failure classes, used by the command line front end for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn format(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Format { .. } | Error::Io { .. } | Error::Image { .. } => ErrorKind::Data,
            Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Runtime,
        }
    }
}
