use alloc::string::String;

/// Errors produced anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("rectangle out of bounds")]
    OutOfBounds,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("symbol {symbol} exceeds the alphabet limit {limit}")]
    AlphabetOverflow { symbol: u32, limit: u32 },
    #[error("declared symbol count {declared} does not match stream count {stored}")]
    CountMismatch { declared: usize, stored: usize },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated input")]
    Truncated,
    #[error("corrupt data: {0}")]
    Corrupt(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected, got })
    }
}
