use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor, linear-algebra, and model operations.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// Data length does not match the product of the shape dims.
    DataLength { expected: usize, got: usize },
    /// Two shapes that must agree (or broadcast) do not.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A single shape is invalid for the requested operation.
    InvalidShape { op: &'static str, shape: Vec<usize>, details: String },
    /// A non-finite value (NaN/Inf) was found where finite data is required.
    NonFinite { op: &'static str },
    /// A softmax row had no unmasked entry and the caller did not opt in.
    DegenerateSoftmaxRow { row: usize },
    /// A triangular or LU solve hit a near-zero pivot.
    SingularDiagonal { row: usize, value: f64 },
    /// An operation's contract was violated (provenance, argument kind, ...).
    Contract { op: &'static str, details: String },
    /// Invalid model or run configuration.
    Config { details: String },
    /// Numeric failure inside an operation (reported with the op name).
    Numeric { op: &'static str, details: String },
    /// I/O failure, with the offending path when known.
    Io { path: String, details: String },
    /// Malformed serialized data.
    Format { details: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DataLength { expected, got } => {
                write!(f, "data length mismatch: expected {expected}, got {got}")
            }
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::InvalidShape { op, shape, details } => {
                write!(f, "{op}: invalid shape {shape:?} ({details})")
            }
            Error::NonFinite { op } => write!(f, "{op}: non-finite value encountered"),
            Error::DegenerateSoftmaxRow { row } => {
                write!(f, "masked_softmax: row {row} is fully masked")
            }
            Error::SingularDiagonal { row, value } => {
                write!(f, "solve: near-zero diagonal at row {row} (|{value:e}| < threshold)")
            }
            Error::Contract { op, details } => write!(f, "{op}: contract violation: {details}"),
            Error::Config { details } => write!(f, "invalid configuration: {details}"),
            Error::Numeric { op, details } => write!(f, "{op}: numeric error: {details}"),
            Error::Io { path, details } => write!(f, "io error on {path}: {details}"),
            Error::Format { details } => write!(f, "malformed data: {details}"),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), details: err.to_string() }
    }
}
