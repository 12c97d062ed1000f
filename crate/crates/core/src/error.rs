use thiserror::Error;

/// Errors produced by the simulator and its analysis tools.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("graph is not connected: {0}")]
    Disconnected(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("infeasible parameters: {0}")]
    Infeasible(String),

    #[error("no fixed point found after {iterations} iterations (last residual {last_residual:e})")]
    NoFixedPoint { iterations: usize, last_residual: f64 },

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("run diverged at t={t}: {reason}")]
    Divergence {
        t: usize,
        reason: String,
        /// Trace up to the last finite iteration.
        partial: Box<crate::engine::RunTrace>,
    },

    #[error("fit window: {0}")]
    FitWindow(String),

    #[error("config: {0}")]
    Config(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidSize(_) => "invalid-size",
            Error::Disconnected(_) => "disconnected",
            Error::ContractViolation(_) => "contract-violation",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::InvalidParameter { .. } => "invalid-parameter",
            Error::Infeasible(_) => "infeasible",
            Error::NoFixedPoint { .. } => "no-fixed-point",
            Error::Numeric(_) => "numeric",
            Error::Divergence { .. } => "divergence",
            Error::FitWindow(_) => "fit-window",
            Error::Config(_) => "config",
            Error::UnknownPreset(_) => "unknown-preset",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
