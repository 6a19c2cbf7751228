use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A shape or argument is invalid on its own.
    InvalidArgument(String),
    /// The loss passed to backward is not a scalar.
    NonScalarLoss(Vec<usize>),
    /// A parameter has no gradient when one is required.
    MissingGradient(String),
    /// Two parameters share a name.
    DuplicateParameter(String),
    /// No parameter with the given name exists.
    UnknownParameter(String),
    /// A function evaluated twice on identical inputs returned different values.
    NonDeterministic { first: f64, second: f64 },
    /// A graph is not a valid dependency tree.
    NotATree(String),
    /// Node or label index out of range.
    OutOfRange { what: &'static str, index: usize, bound: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonScalarLoss(shape) => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::MissingGradient(name) => write!(f, "parameter '{name}' has no gradient"),
            Error::DuplicateParameter(name) => write!(f, "duplicate parameter name '{name}'"),
            Error::UnknownParameter(name) => write!(f, "unknown parameter '{name}'"),
            Error::NonDeterministic { first, second } => write!(
                f,
                "function is not deterministic: evaluations gave {first} and {second}"
            ),
            Error::NotATree(msg) => write!(f, "not a tree: {msg}"),
            Error::OutOfRange { what, index, bound } => {
                write!(f, "{what} index {index} out of range (bound {bound})")
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
