use thiserror::Error;

/// Errors produced by the quantization toolkit.
#[derive(Debug, Error, PartialEq)]
pub enum RazerError {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid special-value set: {0}")]
    InvalidSvSet(String),

    #[error("invalid code {code:#06b} for {dtype}")]
    InvalidCode { code: u8, dtype: &'static str },

    #[error("value {0} is not representable")]
    NotRepresentable(f32),

    #[error("half-precision pattern {0:#06x} is NaN or infinite")]
    NonFiniteHalf(u16),

    #[error("wrong parameter kind: expected {expected}, found {found}")]
    WrongParams {
        expected: &'static str,
        found: &'static str,
    },

    #[error("not a probability distribution: {0}")]
    NotADistribution(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),

    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),

    #[error("truncated payload: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for RazerError {
    fn from(e: std::io::Error) -> Self {
        RazerError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, RazerError>;
