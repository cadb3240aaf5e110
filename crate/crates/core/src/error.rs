use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("momentum on a no-flux face of D is nonzero (component {alpha},{i}, value {value})")]
    NoFlux { alpha: usize, i: usize, value: f64 },
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("unsupported dimension: {0}")]
    Dimension(String),
    #[error("support too large for the exact transport solver ({0} atoms, limit {1})")]
    SupportTooLarge(usize, usize),
    #[error("negative diffusion time {0}")]
    NegativeTime(f64),
    #[error("support of the pushed density leaves D")]
    SupportOverflow,
    #[error("matrix is not positive definite (smallest eigenvalue {0:e})")]
    NotSpd(f64),
    #[error("matrix is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("measure below floor where an elliptic solve needs positivity: {0}")]
    Singular(String),
    #[error("non-monotone quantile data at node {0}")]
    NonMonotone(usize),
    #[error("epsilon {eps} too small for spacing {h}")]
    EpsTooSmall { eps: f64, h: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
