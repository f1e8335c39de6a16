use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CovcapError>;

#[derive(Debug, Error)]
pub enum CovcapError {
    #[error("subject `{subject}`: {what} is {found}, expected {expected}")]
    DimensionMismatch {
        subject: String,
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("subject `{subject}` contains non-finite values")]
    NonFiniteData { subject: String },
    #[error("subject `{subject}`: first covariate must be exactly 1 (found {found})")]
    MissingIntercept { subject: String, found: f64 },
    #[error("invalid study: {0}")]
    InvalidStudy(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shrinkage is degenerate: all projected variances coincide with the target")]
    DegenerateShrinkage,
    #[error("projected variances have no spread across subjects ({spread:e})")]
    SingularDesign { spread: f64 },
    #[error("covariate design matrix is rank deficient")]
    RankDeficientDesign,
    #[error("Newton iteration for beta failed to converge (gradient norm {gradient_norm:e})")]
    NewtonDivergence { gradient_norm: f64 },
    #[error("projected variance of subject {index} is not positive ({value:e})")]
    NonPositiveProjection { index: usize, value: f64 },
    #[error("constraint matrix H is numerically singular (condition {ratio:e})")]
    SingularH { ratio: f64 },
    #[error("sample-covariance CAP is ill-posed: min T_i = {t_min} must exceed p = {p}")]
    IllPosedCap { t_min: usize, p: usize },
    #[error("requested {k} components but data dimension is {p}")]
    DimensionExhausted { k: usize, p: usize },
    #[error("projected covariance of subject {index} is singular")]
    SingularProjection { index: usize },
    #[error("{failed} of {total} bootstrap replicates failed")]
    BootstrapFailures { failed: usize, total: usize },

    #[error("missing series file {path}")]
    MissingSeriesFile { path: PathBuf },
    #[error("{path}:{line}: expected {expected} columns, found {found}")]
    RaggedRow {
        path: PathBuf,
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: column {column} is not numeric: `{value}`")]
    NonNumericCell {
        path: PathBuf,
        line: u64,
        column: usize,
        value: String,
    },
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CovcapError {
    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            Self::DimensionMismatch { .. } => "DIMENSION_MISMATCH",
            Self::NonFiniteData { .. } => "NON_FINITE_DATA",
            Self::MissingIntercept { .. } => "MISSING_INTERCEPT",
            Self::InvalidStudy(_) => "INVALID_STUDY",
            Self::InvalidConfig(_) => "INVALID_CONFIG",
            Self::DegenerateShrinkage => "DEGENERATE_SHRINKAGE",
            Self::SingularDesign { .. } => "SINGULAR_DESIGN",
            Self::RankDeficientDesign => "RANK_DEFICIENT_DESIGN",
            Self::NewtonDivergence { .. } => "NEWTON_DIVERGENCE",
            Self::NonPositiveProjection { .. } => "NON_POSITIVE_PROJECTION",
            Self::SingularH { .. } => "SINGULAR_H",
            Self::IllPosedCap { .. } => "ILL_POSED_CAP",
            Self::DimensionExhausted { .. } => "DIMENSION_EXHAUSTED",
            Self::SingularProjection { .. } => "SINGULAR_PROJECTION",
            Self::BootstrapFailures { .. } => "BOOTSTRAP_FAILURES",
            Self::MissingSeriesFile { .. } => "MISSING_SERIES_FILE",
            Self::RaggedRow { .. } => "RAGGED_ROW",
            Self::NonNumericCell { .. } => "NON_NUMERIC_CELL",
            Self::Input { .. } => "INPUT_ERROR",
            Self::Io(_) => "IO_ERROR",
        }
    }

    /// Process exit code: 1 for input/validation problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::DimensionMismatch { .. }
            | Self::NonFiniteData { .. }
            | Self::MissingIntercept { .. }
            | Self::InvalidStudy(_)
            | Self::InvalidConfig(_)
            | Self::IllPosedCap { .. }
            | Self::DimensionExhausted { .. }
            | Self::MissingSeriesFile { .. }
            | Self::RaggedRow { .. }
            | Self::NonNumericCell { .. }
            | Self::Input { .. }
            | Self::Io(_) => 1,
            Self::DegenerateShrinkage
            | Self::SingularDesign { .. }
            | Self::RankDeficientDesign
            | Self::NewtonDivergence { .. }
            | Self::NonPositiveProjection { .. }
            | Self::SingularH { .. }
            | Self::SingularProjection { .. }
            | Self::BootstrapFailures { .. } => 2,
        }
    }
}
