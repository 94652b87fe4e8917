//! The nonsmooth NLP interface consumed by the solver.
//!
//! ```text
//! minimize    f(x)
//! subject to  h(x) = 0
//!             g_lower ≤ g(x) ≤ g_upper
//! ```
//!
//! All functions are assumed locally Lipschitz and differentiable almost
//! everywhere. Functions flagged as nonsmooth have their gradients sampled.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::EvalError;

/// Identifies one scalar function of the problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FunctionId {
    Objective,
    Equality(usize),
    Inequality(usize),
}

impl FunctionId {
    /// Flat index: objective first, then equalities, then inequalities.
    pub fn flat_index(self, num_equalities: usize) -> usize {
        match self {
            FunctionId::Objective => 0,
            FunctionId::Equality(i) => 1 + i,
            FunctionId::Inequality(j) => 1 + num_equalities + j,
        }
    }
}

/// Function values at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct Values {
    pub f: f64,
    pub h: Vec<f64>,
    pub g: Vec<f64>,
}

/// First derivatives at a point; Jacobians are row-per-function.
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub grad_f: Vec<f64>,
    pub jac_h: DMatrix<f64>,
    pub jac_g: DMatrix<f64>,
}

impl Derivatives {
    pub fn gradient(&self, id: FunctionId) -> Vec<f64> {
        match id {
            FunctionId::Objective => self.grad_f.clone(),
            FunctionId::Equality(i) => self.jac_h.row(i).iter().copied().collect(),
            FunctionId::Inequality(j) => self.jac_g.row(j).iter().copied().collect(),
        }
    }
}

/// Optional per-iterate diagnostics a problem can expose to the trace.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Monitor {
    /// A scalar of interest (the spectral abscissa for stability problems).
    pub eta: Option<f64>,
    /// Most critical modes as `(re, im)` pairs.
    pub modes: Option<Vec<[f64; 2]>>,
}

pub trait NlpProblem: Sync {
    fn dimension(&self) -> usize;
    fn num_equalities(&self) -> usize;
    fn num_inequalities(&self) -> usize;

    /// `(lower, upper)` bounds of the inequality functions; infinite entries
    /// mean the side is absent.
    fn inequality_bounds(&self) -> (Vec<f64>, Vec<f64>);

    fn values(&self, x: &[f64]) -> Result<Values, EvalError>;

    fn evaluate(&self, x: &[f64]) -> Result<(Values, Derivatives), EvalError>;

    /// Gradient of a single function; used at sampled points.
    fn gradient(&self, id: FunctionId, x: &[f64]) -> Result<Vec<f64>, EvalError>;

    fn is_nonsmooth(&self, _id: FunctionId) -> bool {
        false
    }

    /// Number of additional sample points for function `id`.
    fn sample_size(&self, id: FunctionId, default_p: usize) -> usize {
        if self.is_nonsmooth(id) {
            default_p
        } else {
            0
        }
    }

    fn monitor(&self, _x: &[f64], _detailed: bool) -> Monitor {
        Monitor::default()
    }

    /// Accumulated per-phase timings since the last call, in seconds.
    fn take_profile(&self) -> Vec<(String, f64)> {
        Vec::new()
    }

    fn variable_name(&self, i: usize) -> String {
        format!("x[{i}]")
    }
}
