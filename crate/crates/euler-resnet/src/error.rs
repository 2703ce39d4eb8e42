//! Error type shared by every module in the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes the library reports.
///
/// Numerical divergence during an experiment is deliberately *not* an error:
/// a run that produces a non-finite loss is a legitimate, recordable outcome
/// and is flagged on its run record instead. `NonFinite` is reserved for
/// places where a non-finite value makes the requested computation itself
/// meaningless (for example an exploding initial-value solve).
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands have incompatible shapes; both are named so the message
    /// is actionable without a debugger.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A vector argument has the wrong length for the operation.
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    /// A value stopped being finite at the given step of an iteration.
    NonFinite { context: &'static str, step: usize },
    /// An argument is outside its documented domain.
    InvalidArgument { arg: &'static str, reason: String },
    /// A file could not be read or written.
    Io { path: String, reason: String },
    /// A file exists but its contents do not match the documented format.
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: incompatible shapes {}x{} and {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::DimensionMismatch {
                op,
                expected,
                actual,
            } => write!(f, "{op}: expected length {expected}, got {actual}"),
            Error::NonFinite { context, step } => {
                write!(f, "{context}: non-finite value at step {step}")
            }
            Error::InvalidArgument { arg, reason } => write!(f, "invalid {arg}: {reason}"),
            Error::Io { path, reason } => write!(f, "{path}: {reason}"),
            Error::Parse { path, line, reason } => {
                write!(f, "{path}:{line}: {reason}")
            }
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    /// Wraps an I/O failure with the path it happened on.
    pub fn io(path: &std::path::Path, err: std::io::Error) -> Error {
        Error::Io {
            path: path.display().to_string(),
            reason: err.to_string(),
        }
    }
}
