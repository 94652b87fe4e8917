//! Sequential quadratic programming with gradient sampling for nonsmooth,
//! constrained problems.
//!
//! A problem implements [`NlpProblem`]; [`solve`] drives the iteration and
//! returns the final iterate together with a per-iteration [`Trace`].

pub mod lbfgs;
pub mod problem;
pub mod qp;
pub mod sampling;
pub mod solver;
pub mod subproblem;
pub mod trace;

pub use problem::{Derivatives, FunctionId, Monitor, NlpProblem, Values};
pub use solver::{solve, solve_with_observer, Observer, SolveResult, SolverParams, Status, StepEvent};
pub use trace::{IterationRecord, Trace};

/// Failure inside a problem's function or derivative evaluation.
#[derive(Debug, Clone, thiserror::Error)]
pub enum EvalError {
    #[error("evaluation failed: {0}")]
    Failed(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("QP solver failure: {message} (residual {residual:.3e})")]
    Qp { message: String, residual: f64 },
    #[error("invalid solver parameters: {0}")]
    InvalidParams(String),
    #[error("x0 has dimension {got}, problem expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("problem evaluation failed at iteration {iteration}: {source}")]
    Evaluation {
        iteration: usize,
        #[source]
        source: EvalError,
        /// Records of the iterations completed before the failure.
        trace: Trace,
    },
}

impl SolveError {
    /// The partial trace carried by the error, if any.
    pub fn partial_trace(&self) -> Option<&Trace> {
        match self {
            SolveError::Evaluation { trace, .. } => Some(trace),
            _ => None,
        }
    }
}
