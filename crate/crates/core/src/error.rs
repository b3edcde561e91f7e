use thiserror::Error;

use crate::numerics::FixedSpec;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid fixed-point format: width {width} bits, {frac} fractional bits")]
    InvalidSpec { width: u32, frac: u32 },

    #[error("fixed-point format mismatch: {left:?} vs {right:?}")]
    SpecMismatch { left: FixedSpec, right: FixedSpec },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("row {row} is not balanced: expected {expected} entries, found {found}")]
    Unbalanced {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("relative index {value} at row {row} does not fit in {bits} address bits")]
    RelativeIndexOverflow { row: usize, value: usize, bits: u32 },

    #[error("corrupt memory image: {0}")]
    CorruptImage(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("hook failed: {0}")]
    Hook(String),

    #[error("malformed model document: {0}")]
    Model(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by a bad configuration rather than bad data.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::InvalidSpec { .. } | Error::SpecMismatch { .. } | Error::Config(_)
        )
    }
}
