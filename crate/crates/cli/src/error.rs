use std::fmt;

use fsed_core::Error;

/// CLI-level error: either a usage problem (bad flags, bad config file) or
/// an error bubbled up from the core pipeline.
#[derive(Debug)]
pub enum AppError {
    Usage(String),
    Core(Error),
}

pub type Result<T> = std::result::Result<T, AppError>;

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Usage(msg) => write!(f, "{msg}"),
            AppError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for AppError {
    fn from(e: Error) -> Self {
        AppError::Core(e)
    }
}

impl AppError {
    /// Exit codes: 1 usage, 2 data, 3 internal.
    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Core(e) => match e {
                Error::InvalidConfig(_) | Error::Plan(_) => 1,
                Error::ShapeMismatch { .. } | Error::NoCachedForward => 3,
                _ => 2,
            },
        }
    }
}
