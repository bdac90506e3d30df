use thiserror::Error;

/// Error type shared by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("infeasible initialisation parameters: {0}")]
    Infeasible(String),
    #[error("operation not supported for this network variant: {0}")]
    Variant(String),
    #[error("degenerate propagation: {0}")]
    Degenerate(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },
    #[error("level {level} unreachable along ray after {doublings} bracket doublings")]
    UnreachableLevel { level: f64, doublings: usize },
    #[error("degenerate level set: {0}")]
    DegenerateLevel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
