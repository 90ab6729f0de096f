use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report. Variants map onto CLI exit codes
/// through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller broke an API contract (non-scalar backward root, missing gradient, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Mathematically undefined input, e.g. cosine similarity of a zero vector.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    /// Malformed user input that is not tied to a file location.
    #[error("input error: {0}")]
    Input(String),

    /// Malformed file content, located by line or byte offset.
    #[error("{path}: {location}: {detail}")]
    Parse {
        path: PathBuf,
        location: String,
        detail: String,
    },

    #[error("incompatible checkpoints: {0}")]
    IncompatibleCheckpoint(String),

    /// Training produced a non-finite loss.
    #[error("numerical abort at step {step} (task {task:?}, batch digest {digest}): {detail}")]
    Numerical {
        step: usize,
        task: String,
        digest: String,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
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

    pub(crate) fn parse(
        path: impl Into<PathBuf>,
        location: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        Error::Parse {
            path: path.into(),
            location: location.into(),
            detail: detail.into(),
        }
    }

    /// 1 = usage, 2 = data, 3 = numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical { .. } => 3,
            Error::Contract(_) => 1,
            _ => 2,
        }
    }
}
