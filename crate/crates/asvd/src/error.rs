use thiserror::Error;

/// Unified error type for the compression toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An iterative numeric routine failed to converge or hit a degenerate input.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// A container file is malformed or internally inconsistent.
    #[error("format error: {0}")]
    FormatError(String),

    /// No rank allocation can reach the requested parameter budget.
    /// `best_achievable` is the smallest parameter ratio any allocation reaches.
    #[error("budget infeasible: best achievable parameter ratio is {best_achievable}")]
    InfeasibleBudget { best_achievable: f64 },

    /// A fixed-capacity cache was asked to hold more tokens than it was sized for.
    #[error("capacity exceeded: {0}")]
    CapacityExceeded(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::NumericalFailure(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::FormatError(msg.into())
    }
}
