use std::path::PathBuf;

/// Errors produced by the enhancement toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("sample rate mismatch: expected {expected} Hz, found {found} Hz in {path}")]
    SampleRateMismatch {
        expected: u32,
        found: u32,
        path: PathBuf,
    },

    #[error("length mismatch: expected {expected} samples, found {found} in {path}")]
    LengthMismatch {
        expected: usize,
        found: usize,
        path: PathBuf,
    },

    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("sample amplitude {value} at channel {channel}, index {index} exceeds the pcm16 range")]
    Clipping {
        channel: usize,
        index: usize,
        value: f64,
    },

    #[error("invalid wave: {0}")]
    InvalidWave(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("signal of {len} samples is shorter than one analysis window ({window})")]
    TooShort { len: usize, window: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no usable channels: every channel was flagged as failed")]
    NoUsableChannels,

    #[error("need at least {needed} usable channels, have {available}")]
    TooFewChannels { needed: usize, available: usize },

    #[error("covariance matrix is numerically singular at bin {bin}")]
    SingularCovariance { bin: usize },

    #[error("calibration: {0}")]
    Calibration(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("wav codec error: {0}")]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
