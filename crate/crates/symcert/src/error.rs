use thiserror::Error;

/// Errors raised by the task model, kernels, solvers and certificate pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("scheme-infeasible: {0}")]
    SchemeInfeasible(String),
    #[error("family-not-disjoint: string {string:?} matches templates {first} and {second}")]
    FamilyNotDisjoint { string: Vec<usize>, first: usize, second: usize },
    #[error("no-fresh-pair: vocabulary of {vocab} tokens cannot host templates {a} and {b}")]
    NoFreshPair { a: usize, b: usize, vocab: usize },
    #[error("kernel-not-psd: minimum eigenvalue {min_eig:e} below tolerance {tol:e}")]
    KernelNotPsd { min_eig: f64, tol: f64 },
    #[error("test-not-in-family: {0:?}")]
    TestNotInFamily(Vec<usize>),
    #[error("E_rep-violated: block {0} is empty")]
    EmptyBlock(usize),
    #[error("solver did not converge after {iters} iterations (residual {residual:e})")]
    NonConvergence { iters: usize, residual: f64 },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("prompt-gate-violated: prompted kernel at eta = 0 differs from the base kernel by {0:e}")]
    PromptGate(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
