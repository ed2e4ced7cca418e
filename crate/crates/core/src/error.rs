use thiserror::Error;

/// Errors raised by the library. Per-voxel fit failures inside the map
/// pipeline are recorded as status codes instead of propagated.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid tissue parameters: {0}")]
    InvalidParams(String),
    #[error("invalid echo series: {0}")]
    InvalidSeries(String),
    #[error("invalid phantom layout: {0}")]
    InvalidLayout(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("signal is not decaying (slope {0})")]
    NonDecaying(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
