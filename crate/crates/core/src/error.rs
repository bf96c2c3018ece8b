use thiserror::Error;

use crate::tensor::Shape;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("division by zero in strict mode")]
    ZeroDivisor,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid axis {0}")]
    InvalidAxis(usize),
    #[error("backward requires a scalar loss, got {0:?}")]
    NonScalarLoss(Shape),
    #[error("backward already ran on this tape; reset it first")]
    AlreadyBackpropagated,
    #[error("loss does not belong to this tape")]
    DetachedGraph,
    #[error("not invertible: {0}")]
    NotInvertible(String),
    #[error("function is not deterministic: {0}")]
    NonDeterministic(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
