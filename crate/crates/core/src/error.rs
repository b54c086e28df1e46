//! Error categories shared across the crate.

use std::fmt;
use std::io;
use std::path::PathBuf;

#[derive(Debug)]
pub enum CoreError {
    /// I/O failure, annotated with the path involved.
    Io { path: PathBuf, source: io::Error },
    /// File header is not the expected JSON line.
    MalformedHeader(String),
    /// Payload does not hold exactly the announced number of entries.
    PayloadLength { expected: usize, got: usize },
    /// A dimension is zero or otherwise out of range.
    InvalidDimension(String),
    /// A value is NaN or infinite where finite data is required.
    NonFinite(String),
    /// A value is negative where nonnegative data is required.
    NegativeValue(String),
    /// Array shapes do not line up.
    ShapeMismatch(String),
    /// Token spec does not divide the grid dimensions.
    TokenSpecIncompatible(String),
    /// Parameter outside its documented range.
    InvalidArgument(String),
    /// Mask has no target position.
    EmptyMask(String),
    /// Metric asked over an empty region.
    EmptyRegion(String),
    /// Exact search would exceed its size guard.
    SearchGuard(String),
    /// Task/operation combination is not supported.
    Unsupported(String),
    /// Training or fine-tuning produced a non-finite loss.
    Diverged(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Io { path, source } => write!(f, "i/o error on {}: {source}", path.display()),
            CoreError::MalformedHeader(m) => write!(f, "malformed header: {m}"),
            CoreError::PayloadLength { expected, got } => {
                write!(f, "payload length mismatch: expected {expected} entries, got {got}")
            }
            CoreError::InvalidDimension(m) => write!(f, "invalid dimension: {m}"),
            CoreError::NonFinite(m) => write!(f, "non-finite value: {m}"),
            CoreError::NegativeValue(m) => write!(f, "negative value: {m}"),
            CoreError::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            CoreError::TokenSpecIncompatible(m) => write!(f, "token spec incompatible: {m}"),
            CoreError::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            CoreError::EmptyMask(m) => write!(f, "empty mask: {m}"),
            CoreError::EmptyRegion(m) => write!(f, "empty region: {m}"),
            CoreError::SearchGuard(m) => write!(f, "search guard exceeded: {m}"),
            CoreError::Unsupported(m) => write!(f, "unsupported: {m}"),
            CoreError::Diverged(m) => write!(f, "diverged: {m}"),
        }
    }
}

impl std::error::Error for CoreError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CoreError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
