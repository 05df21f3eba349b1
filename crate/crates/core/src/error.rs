use thiserror::Error;

/// Errors raised by the inference engines and their supporting math.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("matrix is not positive definite{}", context_suffix(.0))]
    NotPositiveDefinite(Option<String>),

    #[error("unsupported link for this operation: {0}")]
    UnsupportedLink(String),

    /// Every particle assigns zero likelihood to the current observation.
    #[error("degenerate particle population at observation {index}")]
    DegeneratePopulation { index: usize },

    #[error("HMC tuning failed: divergence rate {divergence_rate:.3} over {steps} pilot steps")]
    TuningFailure { divergence_rate: f64, steps: usize },

    #[error("no convergence after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        last: Vec<f64>,
    },

    #[error("non-finite objective: {0}")]
    NonFinite(String),

    #[error("invalid dataset: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn context_suffix(ctx: &Option<String>) -> String {
    match ctx {
        Some(c) => format!(" ({c})"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
