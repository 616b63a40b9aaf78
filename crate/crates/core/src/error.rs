//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor, quantizer, trainer, storage, and accounting
/// operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of operands do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A tensor constructor or kernel saw NaN or infinity.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Centroid initialization has no usable data (e.g. an all-zero tensor).
    #[error("degenerate initialization: {0}")]
    DegenerateInit(String),

    /// No grid point satisfies the scaling constraint within tolerance.
    #[error("no feasible scaling solution; best residual {best_residual}")]
    Infeasible { best_residual: f64 },

    /// A configuration value is out of its documented range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    /// A ternary layer violates its structural invariants.
    #[error("corrupt ternary layer: {0}")]
    CorruptLayer(String),

    /// A serialized file does not follow the documented format.
    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
