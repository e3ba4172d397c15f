use std::fmt;

use bess_core::Error;

/// Failure of a run, grouped by exit status.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable or invalid configuration (exit 2).
    Config(String),
    /// The numerics broke down (exit 3).
    Numerical(String),
    /// A result contradicts theory, e.g. a negative duality gap (exit 4).
    Invariant(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Invariant(_) => 4,
            CliError::Io(_) => 1,
        }
    }

    /// Errors raised while turning the config into model objects are
    /// configuration errors whatever their kind.
    pub fn from_setup(e: Error) -> Self {
        match e {
            Error::Invariant(_) => e.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidParameter(_)
            | Error::GridMismatch(_)
            | Error::Dimension { .. }
            | Error::TooManyAxes(_) => CliError::Config(msg),
            Error::NonFinite { .. }
            | Error::RateOutOfRange { .. }
            | Error::Inadmissible(..)
            | Error::Overflow { .. }
            | Error::NonFiniteCoefficient { .. }
            | Error::Unstable { .. } => CliError::Numerical(msg),
            Error::Invariant(_) => CliError::Invariant(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Invariant(m) => write!(f, "invariant violated: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}
