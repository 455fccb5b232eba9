use std::io;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// Variants are grouped so the CLI can map them onto exit codes:
/// configuration problems, data/format problems, and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("input too short: {0}")]
    InputTooShort(String),
    #[error("impossible alignment: {0}")]
    ImpossibleAlignment(String),
    #[error("backward error: {0}")]
    Backward(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Whether the failure originates from numerics rather than inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_) | Error::Domain(_) | Error::ImpossibleAlignment(_) | Error::Backward(_) | Error::Numeric(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
