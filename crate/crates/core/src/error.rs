use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure modes of the weight file codec. Each maps to a distinct code.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected \"SSMW\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("unknown format version {0}")]
    UnknownVersion(u32),
    #[error("non-finite value in tensor `{name}`")]
    NonFinitePayload { name: String },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("invalid field: {0}")]
    Invalid(String),
}

impl FormatError {
    /// Stable numeric code per failure class.
    pub fn code(&self) -> u8 {
        match self {
            FormatError::BadMagic { .. } => 1,
            FormatError::Truncated { .. } => 2,
            FormatError::UnknownVersion(_) => 3,
            FormatError::NonFinitePayload { .. } => 4,
            FormatError::ChecksumMismatch { .. } => 5,
            FormatError::Invalid(_) => 6,
        }
    }
}

/// PPM decoding failures.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("unsupported image: {0}")]
    Unsupported(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("backward already ran on this graph")]
    AlreadyBackpropagated,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("missing weight entry `{0}`")]
    MissingWeight(String),
    #[error("weight file: {0}")]
    Format(#[from] FormatError),
    #[error("data error: {0}")]
    Data(String),
    #[error("image {path}: {source}")]
    Image { path: PathBuf, source: ImageError },
    #[error("config error at {key}{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config {
        key: String,
        line: Option<usize>,
        msg: String,
    },
    #[error(
        "numeric failure at epoch {epoch}, batch {batch}: non-finite value in `{tensor}`"
    )]
    Numeric {
        epoch: usize,
        batch: usize,
        tensor: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            line,
            msg: msg.into(),
        }
    }
}
