use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("raw payload size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("scene has an empty foreground")]
    EmptyForeground,
    #[error("degenerate landmarks: low and high landmarks coincide at {0}")]
    DegenerateLandmarks(u16),
    #[error("protocol mismatch: expected {expected}, found {found}")]
    ProtocolMismatch { expected: String, found: String },
    #[error("degenerate polynomial fit: {0}")]
    DegenerateFit(String),
    #[error("scene dimensions differ: {0:?} vs {1:?}")]
    DimsMismatch([usize; 3], [usize; 3]),
    #[error("singular transform matrix")]
    SingularMatrix,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the numerical machinery rather than of the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::SingularMatrix)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
