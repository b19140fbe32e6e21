use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum RemlError {
    #[error("zero pivot at position {index}: |d| = {value:e} below tolerance {tolerance:e}")]
    ZeroPivot {
        index: usize,
        value: f64,
        tolerance: f64,
    },
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),
    #[error("parameter {index} = {value} outside admissible region [{lower}, {upper}]")]
    InadmissibleParameter {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("index {index} out of range (parameter count {count})")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("information matrix is singular at iteration {iteration}")]
    SingularInformation { iteration: usize },
    #[error("problem size n = {n} exceeds the dense oracle cap {cap}")]
    OracleCapExceeded { n: usize, cap: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("no convergence after {iterations} iterations (max |score| = {max_score:e})")]
    MaxIterations { iterations: usize, max_score: f64 },
    #[error("stalled at the boundary with parameters {fixed:?} fixed")]
    BoundaryStall { fixed: Vec<String> },
}

impl RemlError {
    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            Self::ZeroPivot { .. } => "zero_pivot",
            Self::NotPositiveDefinite(_) => "not_positive_definite",
            Self::DimensionMismatch(_) => "dimension_mismatch",
            Self::RankDeficient(_) => "rank_deficient",
            Self::InadmissibleParameter { .. } => "inadmissible_parameter",
            Self::IndexOutOfRange { .. } => "index_out_of_range",
            Self::InvalidModel(_) => "invalid_model",
            Self::SingularInformation { .. } => "singular_information",
            Self::OracleCapExceeded { .. } => "oracle_cap_exceeded",
            Self::Parse(_) => "parse_error",
            Self::MaxIterations { .. } => "max_iterations",
            Self::BoundaryStall { .. } => "boundary_stall",
        }
    }

    /// Failures caused by the input rather than by the numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Self::DimensionMismatch(_)
                | Self::RankDeficient(_)
                | Self::InadmissibleParameter { .. }
                | Self::IndexOutOfRange { .. }
                | Self::InvalidModel(_)
                | Self::OracleCapExceeded { .. }
                | Self::Parse(_)
        )
    }
}

pub type Result<T, E = RemlError> = std::result::Result<T, E>;
