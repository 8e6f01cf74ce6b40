//! Error type shared by the fallible operations in this crate.

use alloc::string::String;
use core::fmt;

/// Failures surfaced by public operations.  Internal invariant violations
/// (mismatched shapes produced by our own algebra) are bugs and panic instead.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Two operands disagree on a dimension.
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    /// A configuration field is out of its documented range.
    InvalidConfig(String),
    /// A context with zero demonstrations / examples where at least one is required.
    EmptyContext,
    /// A value that must be finite was NaN or infinite.
    NonFinite(&'static str),
    /// Training loss exceeded the divergence guard.
    Diverged { step: u64, loss: f64 },
    /// Checkpoint text could not be parsed.
    BadCheckpoint(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {}x{} vs {}x{}", lhs.0, lhs.1, rhs.0, rhs.1)
            }
            CoreError::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            CoreError::EmptyContext => write!(f, "context must contain at least one example"),
            CoreError::NonFinite(what) => write!(f, "non-finite value in {what}"),
            CoreError::Diverged { step, loss } => {
                write!(f, "training diverged at step {step} (loss {loss:e})")
            }
            CoreError::BadCheckpoint(msg) => write!(f, "bad checkpoint: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
