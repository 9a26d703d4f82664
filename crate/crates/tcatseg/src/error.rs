//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or feature extents do not agree.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A count argument is out of range (e.g. more samples than points).
    #[error("size error in {op}: {msg}")]
    Size { op: &'static str, msg: String },

    /// A caller violated an operation precondition.
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// Input data failed validation (bad labels, non-unit normals, NaN, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// An index points outside its container.
    #[error("index {index} out of range (len {len}) in {op}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },

    /// A text file could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A binary or text file has the wrong layout or magic.
    #[error("format error: {0}")]
    Format(String),

    /// A computation produced a non-finite value.
    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for usage/validation problems,
    /// 3 for numerical aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
