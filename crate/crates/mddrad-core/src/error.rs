use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum MddError {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition on arguments was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed or truncated on-disk data.
    #[error("format error: {0}")]
    Format(String),

    /// Crop window not covered by the native raster.
    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MddError>;

impl MddError {
    pub fn contract(msg: impl Into<String>) -> Self {
        MddError::Contract(msg.into())
    }
}
