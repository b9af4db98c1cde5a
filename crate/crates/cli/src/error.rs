use std::fmt;

use anisoflow::Error;

/// Schema problems abort the run with exit 2; anything else raised while a
/// pipeline runs is reported as a failed check.
#[derive(Debug)]
pub enum RunError {
    Schema(String),
    Runtime(String),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Schema(m) => write!(f, "schema error: {m}"),
            RunError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidGrid(_)
            | Error::InvalidExponent(_)
            | Error::InvalidArgument(_)
            | Error::InvalidRegion(_)
            | Error::GridMismatch(_)
            | Error::Unknown { .. }
            | Error::Cfl { .. }
            | Error::Parse(_)
            | Error::EmptyRegion => RunError::Schema(e.to_string()),
            _ => RunError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Runtime(e.to_string())
    }
}
