use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A value lies outside the domain of a function (log of 0, division by 0).
    Domain { op: &'static str, detail: String },
    /// A hyperparameter is outside its admissible range.
    Parameter { name: &'static str, detail: String },
    /// Malformed input data (bad labels, empty datasets, ...).
    Data(String),
    /// A caller broke an API contract (non-scalar loss, missing gradient, ...).
    Contract(String),
    /// A loss term evaluated to NaN or infinity.
    NonFinite { term: String },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Domain { op, detail } => write!(f, "{op}: domain error: {detail}"),
            Error::Parameter { name, detail } => write!(f, "invalid parameter `{name}`: {detail}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::NonFinite { term } => write!(f, "non-finite value in loss term `{term}`"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn param_err(name: &'static str, detail: impl Into<String>) -> Error {
    Error::Parameter {
        name,
        detail: detail.into(),
    }
}
