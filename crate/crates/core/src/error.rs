use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value at timestep {t}")]
    NonFinite { t: usize },
    #[error("negative radicand {value:e} at timestep {t}")]
    Domain { t: usize, value: f64 },
    #[error("covariance of component {0} is not positive definite")]
    NotPositiveDefinite(usize),
    #[error("schedule mismatch: trajectory built for {expected:#018x}, got {got:#018x}")]
    ScheduleMismatch { expected: u64, got: u64 },
    #[error("rank-deficient probe block at timestep {t}, column {column}")]
    RankDeficient { t: usize, column: usize },
    #[error("no eigenvalue for pc {index} at timestep {t}")]
    MissingLambda { index: usize, t: usize },
    #[error("no principal components stored for timestep {0}")]
    MissingPcs(usize),
    #[error("mask index {index} out of range for dimension {dim}")]
    MaskOutOfRange { index: usize, dim: usize },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("adherence is undefined for an unconditional target")]
    UnconditionalTarget,
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
