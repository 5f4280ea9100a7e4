use alloc::string::String;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training produced a non-finite loss.
    #[error("training diverged in {stage} at epoch {epoch}")]
    Diverged { stage: &'static str, epoch: usize },

    /// The layer holds a single repeated value so no affine range exists.
    #[error("degenerate layer: constant value {value}")]
    DegenerateLayer { value: f64 },

    /// A packed representation does not match its declared geometry.
    #[error("format error: {0}")]
    Format(String),

    /// No bit width in the searched range met the accuracy requirement.
    #[error(
        "bit-width search failed: best candidate b={best_bits} accuracy={best_accuracy:.4} reliability={best_reliability:.4}"
    )]
    SearchFailed {
        best_bits: u32,
        best_accuracy: f64,
        best_reliability: f64,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(alloc::format!($($arg)*)) };
}

macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(alloc::format!($($arg)*)) };
}

pub(crate) use contract_err;
pub(crate) use dim_err;
