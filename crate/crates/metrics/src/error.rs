use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    /// A score's denominator is zero for these inputs.
    #[error("undefined denominator: {0}")]
    UndefinedDenominator(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("embedding error: {0}")]
    Embedding(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("all n-gram weights are zero")]
    DegenerateWeights,

    #[error("infeasible transport problem: {0}")]
    Feasibility(String),

    #[error("sinkhorn did not converge after {iters} iterations (marginal residual {residual:e})")]
    Convergence { iters: usize, residual: f64 },

    #[error("invalid loss spec: {0}")]
    LossSpec(String),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;
