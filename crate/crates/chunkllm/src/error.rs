use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the tensor library, model code, and the decode engine.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    Shape { op: &'static str, detail: String },
    /// Input values violate an operation's domain (empty input, masked-out
    /// rows, non-distributions, ...).
    Domain { op: &'static str, detail: String },
    /// A configuration value is invalid or inconsistent.
    Config(String),
    /// Caller-supplied data is unusable (context overflow, length mismatch).
    Input(String),
    /// An index is out of bounds.
    Index { op: &'static str, index: usize, bound: usize },
    /// A serialized artifact is malformed (bad magic, truncation, ...).
    Format(String),
    /// An operation produced a NaN or infinity.
    NonFinite { op: &'static str },
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Domain { op, detail } => write!(f, "domain error in {op}: {detail}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Index { op, index, bound } => {
                write!(f, "index error in {op}: {index} out of bound {bound}")
            }
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
