use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two objects that must agree in size do not.
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    InvalidShape(String),
    NonFinite(&'static str),
    Empty(&'static str),
    InvalidArgument(String),
    /// Exhaustive enumeration refused because the instance is too large.
    TooLarge { variables: usize, limit: usize },
    /// The latency budget is below what Algorithm-2-style pre-keeping costs.
    Infeasible { floor: f64, constraint: f64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                what,
                expected,
                found,
            } => write!(f, "{what}: expected size {expected}, found {found}"),
            Error::InvalidShape(msg) => write!(f, "invalid shape: {msg}"),
            Error::NonFinite(what) => write!(f, "{what} contains non-finite values"),
            Error::Empty(what) => write!(f, "{what} is empty"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::TooLarge {
                variables,
                limit,
            } => write!(
                f,
                "instance has {variables} mask variables, enumeration limit is {limit}"
            ),
            Error::Infeasible { floor, constraint } => write!(
                f,
                "latency constraint {constraint} is below the minimum achievable latency {floor}"
            ),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            what,
            expected,
            found,
        })
    }
}
