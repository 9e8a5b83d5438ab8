use thiserror::Error;

use crate::solvers::NnlsResult;

/// Failures raised by the numerical engines in [`crate::solvers`].
#[derive(Debug, Error)]
pub enum SolverError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("tolerance not met after {iterations} iterations (kkt residual {kkt_residual:e})")]
    IterationLimit {
        iterations: usize,
        kkt_residual: f64,
        best: Box<NnlsResult>,
    },

    #[error("input matrix has a negative entry at ({row}, {col})")]
    NegativeInput { row: usize, col: usize },

    #[error("rank {rank} exceeds min(n, d) = {limit}")]
    RankTooLarge { rank: usize, limit: usize },

    #[error("active set is degenerate at coefficient {index} (gradient {gradient:e})")]
    DegenerateActiveSet { index: usize, gradient: f64 },

    #[error("gram matrix of the active support is not positive definite")]
    SingularGram,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("objective diverged: {0}")]
    Divergence(String),

    #[error("invalid solver input: {0}")]
    InvalidInput(String),
}

/// Crate-level error covering every module.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Solver(#[from] SolverError),

    #[error("row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: SolverError,
    },

    #[error("dimension {d} is too small for a {k}-vertex simplex (need d >= {})", k - 1)]
    DimensionTooSmall { k: usize, d: usize },

    #[error("class {0} has no samples")]
    EmptyClass(u32),

    #[error("more than half of the concept rows pruned to zero ({pruned} of {rank})")]
    RankCollapse { pruned: usize, rank: usize },

    #[error("bank rank {0} is too small (need >= 2)")]
    RankTooSmall(usize),

    #[error("class {0} already exists")]
    DuplicateClass(u32),

    #[error("class {0} does not extend the contiguous id range")]
    ClassGap(u32),

    #[error("mean feature of class {0} has zero norm")]
    ZeroMean(u32),

    #[error("class {0} has no classifier row or target")]
    MissingRow(u32),

    #[error("label {0} has not been seen")]
    UnknownLabel(u32),

    #[error("invalid feature batch: {0}")]
    InvalidBatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("extractor is not usable: {0}")]
    Extractor(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid value for `{key}`: {reason}")]
    Validation { key: String, reason: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("file truncated while reading {0}")]
    TruncatedFile(&'static str),

    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// True for numerical failures (as opposed to bad input or configuration).
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::Solver(_) | Error::Row { .. } | Error::RankCollapse { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
