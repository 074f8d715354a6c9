use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("matrix is not positive definite (failing pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("{0} did not converge")]
    NoConvergence(String),
    #[error("squash saturated at g = {g:e}: {detail}")]
    Saturation { g: f64, detail: String },
    #[error("denormalized matrix is indefinite at point {point}; the field violates the lower bound")]
    Indefinite { point: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("requested {requested} modes but only {available} are available")]
    TruncationOverflow { requested: usize, available: usize },
    #[error("mode {index} has eigenvalue {value:e}, too small to normalize by")]
    DivisionGuard { index: usize, value: f64 },
    #[error("rank deficient input: {0}")]
    RankDeficient(String),
    #[error("linear solver failure: {0}")]
    Solver(String),
    #[error("parameter outside admissible domain: {0}")]
    Domain(String),
    #[error("degenerate likelihood: {0}")]
    DegenerateLikelihood(String),
    #[error("sampler step size: {0}")]
    StepSize(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T> = core::result::Result<T, Error>;
