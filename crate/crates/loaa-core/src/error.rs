use alloc::string::String;

/// Error type shared by every module in the core crate.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CoreError {
    /// Tensor extents do not line up (matmul inner dims, grid mismatches, ...).
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A configuration is structurally invalid (even kernel, bad preset, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// Input data violates a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),
    /// The API was called in an unsupported order (double backward, foreign var).
    #[error("usage error: {0}")]
    Usage(String),
    /// No bottleneck dimension fits the requested parameter budget.
    #[error("budget error: {0}")]
    Budget(String),
    /// A checkpoint container failed to parse; `offset` is the byte offset of
    /// the field that failed validation.
    #[error("checkpoint error at byte offset {offset}: {message}")]
    Checkpoint { offset: usize, message: String },
    /// A forward or backward pass produced NaN/Inf.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// A metric has no defined value on the given input.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

pub type Result<T> = core::result::Result<T, CoreError>;
