use thiserror::Error;

/// Errors raised by the solvers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("admissibility error: {0}")]
    Admissibility(String),
    #[error("kernel is not in the partitionable class: {0}")]
    NotPartitionable(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("forward scheme diverged at node {node} (|Y| = {value:e})")]
    Divergence { node: usize, value: f64 },
    #[error("inner fixed point did not converge at (t_{row}, t_{col}) after {iterations} iterations")]
    NoConvergence { row: usize, col: usize, iterations: usize },
    #[error("free term error: {0}")]
    FreeTerm(String),
    #[error("block {block} [{start}, {end}] did not contract: residuals {residuals:?}")]
    Cascade { block: usize, start: f64, end: f64, residuals: Vec<f64> },
    #[error("Picard iteration did not converge: residuals {residuals:?}")]
    Picard { residuals: Vec<f64> },
    #[error("projected gradient descent stalled: costs {costs:?}")]
    Stall { costs: Vec<f64> },
}

pub type Result<T> = std::result::Result<T, Error>;
