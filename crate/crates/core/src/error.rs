use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {t}x{h}x{w}: {reason}")]
    InvalidShape {
        t: usize,
        h: usize,
        w: usize,
        reason: &'static str,
    },
    #[error("index ({t}, {y}, {x}) out of range for shape {shape}")]
    IndexOutOfRange {
        t: usize,
        y: usize,
        x: usize,
        shape: String,
    },
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("crop at {origin:?} of size {size} does not fit inside {parent}")]
    CropOutOfBounds {
        origin: [usize; 3],
        size: String,
        parent: String,
    },
    #[error("probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u16),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingData(usize),
    #[error("nonzero padding bits in final payload byte")]
    NonzeroPadding,
    #[error("non-finite value at element {0}")]
    NonFinite(usize),
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error("checkpoint fingerprint mismatch: file has {found}, config expects {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for malformed input files and on-disk format violations.
    pub fn is_format_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::UnsupportedVersion(_)
                | Error::UnsupportedDtype(_)
                | Error::Truncated { .. }
                | Error::TrailingData(_)
                | Error::NonzeroPadding
                | Error::NonFinite(_)
                | Error::Pgm(_)
                | Error::FingerprintMismatch { .. }
                | Error::Checkpoint(_)
                | Error::Io { .. }
                | Error::Json(_)
        )
    }
}
