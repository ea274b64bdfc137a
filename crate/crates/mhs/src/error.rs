use thiserror::Error;

/// Errors shared by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensor shapes that must agree do not. Carries both shapes.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An input value is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The call violates an API contract (e.g. a kernel form that only
    /// exists for time-invariant parameters).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A weights file is malformed. `offset` is the byte position at which
    /// decoding failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A configuration or a loaded tensor fails validation against the
    /// module contract.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dim {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
