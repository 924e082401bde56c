use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no auto-calibration lines available")]
    MissingAcs,

    #[error("calibration region is all zero")]
    ZeroCalibration,

    #[error("root-sum-of-squares below floor at {count} pixel(s) inside the field of view")]
    RssUnderflow { count: usize },

    #[error("insufficient ACS for GRAPPA kernel: need at least {required} contiguous lines, found {found}")]
    InsufficientAcs { required: usize, found: usize },

    #[error("activation tape does not match the parameters or input it is applied to")]
    StaleTape,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: {0}")]
    Checksum(String),

    #[error("malformed file: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
