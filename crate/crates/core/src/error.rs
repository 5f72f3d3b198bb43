use thiserror::Error;

/// Errors raised by estimators, oracles, solvers and samplers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("solver did not converge after {iterations} iterations (best residual {best_residual:.3e})")]
    Solver {
        iterations: usize,
        best_residual: f64,
    },

    #[error("singular Jacobian: {0}")]
    Singular(String),

    #[error("Jacobian oracle failure: {0}")]
    OracleFailure(String),

    #[error("degenerate tangent cone: stacked Jacobians have full column rank")]
    DegenerateCone,

    #[error("tangent probing failed: {0}")]
    Probing(String),

    #[error("chain initialization failed: {0}")]
    Initialization(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("complexity integral failed: {0}")]
    Complexity(String),

    #[error("sampling inefficiency: {0}")]
    Inefficient(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
