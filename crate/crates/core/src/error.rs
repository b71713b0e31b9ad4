use std::fmt;

/// Errors reported by the solver library.
#[derive(Debug)]
pub enum Error {
    /// An argument was outside an operation's documented domain.
    InvalidArgument {
        op: &'static str,
        msg: String,
    },
    /// A coefficient realization lost uniform ellipticity at some fine cell.
    NonPositiveCoefficient {
        cell: (usize, usize),
        value: f64,
    },
    /// A factorization or linear solve failed, or non-finite values appeared.
    Numerical {
        op: &'static str,
        msg: String,
    },
    /// A file could not be read or parsed.
    Io {
        path: String,
        msg: String,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument { op, msg } => write!(f, "{op}: invalid argument: {msg}"),
            Error::NonPositiveCoefficient { cell, value } => write!(
                f,
                "coefficient is not uniformly positive: value {value:e} at fine cell ({}, {})",
                cell.0, cell.1
            ),
            Error::Numerical { op, msg } => write!(f, "{op}: numerical failure: {msg}"),
            Error::Io { path, msg } => write!(f, "{path}: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidArgument { op, msg: msg.into() }
}

pub(crate) fn numerical(op: &'static str, msg: impl Into<String>) -> Error {
    Error::Numerical { op, msg: msg.into() }
}
