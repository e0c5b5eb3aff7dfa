use std::fmt;

/// Errors produced by model construction, solvers, and checkers.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Expression and point (or problem) live in different variable spaces.
    SpaceMismatch,
    /// A referenced block does not exist in the variable space.
    UnknownBlock(String),
    /// Syntax error while parsing an s-expression, with byte position.
    Parse { pos: usize, msg: String },
    /// Vector or matrix sizes do not line up.
    DimensionMismatch { expected: usize, got: usize },
    /// A precondition on the inputs is violated.
    InvalidInput(String),
    /// The instance falls outside what this implementation can decide.
    Capability(String),
    /// An internal consistency check failed; indicates a bug.
    Internal(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::SpaceMismatch => write!(f, "variable space mismatch"),
            Error::UnknownBlock(b) => write!(f, "unknown variable block `{b}`"),
            Error::Parse { pos, msg } => write!(f, "parse error at byte {pos}: {msg}"),
            Error::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            Error::InvalidInput(m) => write!(f, "invalid input: {m}"),
            Error::Capability(m) => write!(f, "not supported: {m}"),
            Error::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
