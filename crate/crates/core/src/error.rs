use std::path::PathBuf;

use thiserror::Error;

use crate::fixedpoint::FixedError;

/// Errors produced while loading data or running the detector.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed PNM header: {0}")]
    MalformedHeader(String),

    #[error("malformed PNM payload: {0}")]
    MalformedPayload(String),

    #[error("truncated PNM payload: expected {expected} samples, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("unsupported PNM maxval {0} (only 255 is accepted)")]
    UnsupportedMaxval(u32),

    #[error("expected a {expected} image, found {found}")]
    UnexpectedFormat {
        expected: &'static str,
        found: &'static str,
    },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("dimension mismatch: {what} is {found:?}, expected {expected:?}")]
    DimensionMismatch {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("region of interest is empty")]
    EmptyRoi,

    #[error("region of interest contains a single class; AUC is undefined")]
    SingleClassRoi,

    #[error("statistics do not match the detector parameters: {0}")]
    StatsMismatch(String),

    #[error(transparent)]
    Fixed(#[from] FixedError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
