use thiserror::Error;

/// Crate-wide error type.
///
/// Variants group failures by class so callers (in particular the CLI) can
/// map them to distinct exit codes: input/validation problems, convergence
/// failures, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input data (CSV rows, panel invariants).
    #[error("data error: {0}")]
    Data(String),

    /// Mismatched vector or matrix dimensions between arguments.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration value outside its admissible range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// An iterative solver exhausted its iteration budget.
    #[error("did not converge: {0}")]
    NonConvergence(String),

    /// A non-finite value surfaced where a finite one is required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Coarse failure class, used by the CLI to pick an exit code.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Data(_) | Error::Dimension(_) | Error::InvalidConfig(_) => {
                ErrorClass::Validation
            }
            Error::NonConvergence(_) | Error::Numerical(_) => ErrorClass::Convergence,
            Error::Io(_) | Error::Csv(_) => ErrorClass::Io,
        }
    }
}

/// Coarse error classes with stable CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Convergence,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorClass::Validation => 2,
            ErrorClass::Convergence => 3,
            ErrorClass::Io => 4,
        }
    }
}
