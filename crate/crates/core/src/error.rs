use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum DimError {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DimError>;

pub(crate) fn invalid(msg: impl Into<String>) -> DimError {
    DimError::InvalidArgument(msg.into())
}

pub(crate) fn ensure_shape(op: &'static str, expected: &[usize], got: &[usize]) -> Result<()> {
    if expected != got {
        return Err(DimError::Shape {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        });
    }
    Ok(())
}
