use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} at (x={x}, y={y}) is out of range for {num_classes} classes")]
    LabelOutOfRange {
        x: usize,
        y: usize,
        label: u32,
        num_classes: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unsupported variant: {0}")]
    UnsupportedVariant(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unsupported maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),

    #[error("truncated payload in {0}")]
    TruncatedPayload(String),

    #[error("bad magic: expected \"SMT1\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("size mismatch in {entry}: {detail}")]
    SizeMismatch { entry: String, detail: String },

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
