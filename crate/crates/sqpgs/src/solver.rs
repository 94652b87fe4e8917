//! The outer SQP-GS iteration.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::lbfgs::LbfgsHessian;
use crate::problem::{Derivatives, FunctionId, NlpProblem, Values};
use crate::sampling::{sample_points, substream};
use crate::subproblem::{build_subproblem, infeasibility, model_reduction, FunctionModel, LinearModel, QpSolution};
use crate::trace::{IterationRecord, Trace};
use crate::{EvalError, SolveError};

/// Floor on the eigenvalues of the Hessian approximation.
pub const H_MIN: f64 = 1e-8;
/// Ceiling on the eigenvalues of the Hessian approximation.
pub const H_MAX: f64 = 1e4;
/// Smallest step length tried by the backtracking search.
pub const BETA_MIN: f64 = 1e-12;
/// Consecutive line-search failures tolerated before giving up.
pub const MAX_LINE_SEARCH_FAILURES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverParams {
    pub rho0: f64,
    pub mu_rho: f64,
    pub eps0: f64,
    pub mu_eps: f64,
    pub tau0: f64,
    pub mu_tau: f64,
    pub varpi: f64,
    pub gamma: f64,
    pub nu_in: f64,
    pub nu_s: f64,
    pub p: usize,
    pub k_max: usize,
    pub lbfgs_memory: usize,
    pub seed: u64,
    pub qp_tol: f64,
    /// Worker threads for sampled-gradient evaluation (1 = sequential).
    pub threads: usize,
    /// Ask the problem for detailed monitoring (critical modes).
    pub log_modes: bool,
    /// Record per-phase timings in the trace.
    pub profile: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            rho0: 0.1,
            mu_rho: 0.5,
            eps0: 0.1,
            mu_eps: 0.5,
            tau0: 0.1,
            mu_tau: 0.8,
            varpi: 1.0,
            gamma: 0.8,
            nu_in: 1e-3,
            nu_s: 1e-2,
            p: 10,
            k_max: 100,
            lbfgs_memory: 10,
            seed: 0,
            qp_tol: 1e-8,
            threads: 1,
            log_modes: false,
            profile: false,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<(), SolveError> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(SolveError::InvalidParams(format!("{name} = {v} must lie in (0, 1)")))
            }
        };
        unit("mu_rho", self.mu_rho)?;
        unit("mu_eps", self.mu_eps)?;
        unit("mu_tau", self.mu_tau)?;
        unit("gamma", self.gamma)?;
        if !(self.varpi > 0.0 && self.varpi <= 1.0) {
            return Err(SolveError::InvalidParams(format!("varpi = {} must lie in (0, 1]", self.varpi)));
        }
        for (name, v) in [
            ("rho0", self.rho0),
            ("eps0", self.eps0),
            ("tau0", self.tau0),
            ("nu_in", self.nu_in),
            ("nu_s", self.nu_s),
            ("qp_tol", self.qp_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SolveError::InvalidParams(format!("{name} = {v} must be positive")));
            }
        }
        if self.k_max == 0 {
            return Err(SolveError::InvalidParams("k_max must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Converged,
    IterationLimit,
    QpFailure,
    LineSearchFailure,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub values: Values,
    pub sigma_max: f64,
    pub status: Status,
    pub trace: Trace,
    /// Penalty, radius and tolerance when the solver stopped.
    pub rho: f64,
    pub eps: f64,
    pub tau: f64,
}

/// What happened in one iteration, handed to an [`Observer`].
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub x: &'a [f64],
    /// The next iterate (equal to `x` on a null step).
    pub x_next: &'a [f64],
    pub d: &'a DVector<f64>,
    pub hessian: &'a DMatrix<f64>,
    pub qp: &'a QpSolution,
    pub record: &'a IterationRecord,
    pub varpi: f64,
}

pub trait Observer {
    fn on_iteration(&mut self, event: &StepEvent<'_>);
}

impl<F: FnMut(&StepEvent<'_>)> Observer for F {
    fn on_iteration(&mut self, event: &StepEvent<'_>) {
        self(event)
    }
}

struct NoObserver;

impl Observer for NoObserver {
    fn on_iteration(&mut self, _: &StepEvent<'_>) {}
}

pub fn solve<P: NlpProblem + ?Sized>(problem: &P, x0: &[f64], params: &SolverParams) -> Result<SolveResult, SolveError> {
    solve_with_observer(problem, x0, params, &mut NoObserver)
}

fn merit_of(values: &Values, lower: &[f64], upper: &[f64], rho: f64) -> (f64, f64) {
    let sigma = infeasibility(values, lower, upper);
    let smax = sigma.iter().copied().fold(0.0, f64::max);
    (rho * values.f + sigma.iter().sum::<f64>(), smax)
}

fn lagrangian_gradient(d: &Derivatives, rho: f64, mu_h: &[f64], mu_g: &[f64]) -> DVector<f64> {
    let mut g = DVector::from_column_slice(&d.grad_f) * rho;
    if !mu_h.is_empty() {
        g += d.jac_h.transpose() * DVector::from_column_slice(mu_h);
    }
    if !mu_g.is_empty() {
        g += d.jac_g.transpose() * DVector::from_column_slice(mu_g);
    }
    g
}

fn check_finite(values: &Values) -> Result<(), EvalError> {
    if !values.f.is_finite() {
        return Err(EvalError::NonFinite("objective".into()));
    }
    if let Some(i) = values.h.iter().position(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite(format!("equality {i}")));
    }
    if let Some(j) = values.g.iter().position(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite(format!("inequality {j}")));
    }
    Ok(())
}

/// Sampled gradients of one function (excluding the anchor).
fn sampled_gradients<P: NlpProblem + ?Sized>(
    problem: &P,
    id: FunctionId,
    x: &[f64],
    eps: f64,
    count: usize,
    seed: u64,
    k: usize,
    m_h: usize,
) -> Result<Vec<DVector<f64>>, EvalError> {
    let mut rng = substream(seed, k, id.flat_index(m_h));
    let points = sample_points(x, eps, count, &mut rng);
    let mut out = Vec::with_capacity(count);
    for pt in &points[1..] {
        let g = match problem.gradient(id, pt) {
            Ok(g) if g.iter().all(|v| v.is_finite()) => g,
            _ => {
                // One redraw from the same substream, then give up.
                let retry = sample_points(x, eps, 1, &mut rng);
                let g = problem.gradient(id, &retry[1])?;
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(EvalError::NonFinite(format!("sampled gradient of {id:?}")));
                }
                g
            }
        };
        out.push(DVector::from_vec(g));
    }
    Ok(out)
}

struct Timer {
    enabled: bool,
    phases: Vec<(String, f64)>,
}

impl Timer {
    fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        if !self.enabled {
            return f();
        }
        let t0 = Instant::now();
        let out = f();
        let dt = t0.elapsed().as_secs_f64();
        match self.phases.iter_mut().find(|(n, _)| n == name) {
            Some((_, v)) => *v += dt,
            None => self.phases.push((name.to_string(), dt)),
        }
        out
    }
}

/// Runs the iteration, reporting every iteration to `observer`.
pub fn solve_with_observer<P: NlpProblem + ?Sized, O: Observer + ?Sized>(
    problem: &P,
    x0: &[f64],
    params: &SolverParams,
    observer: &mut O,
) -> Result<SolveResult, SolveError> {
    params.validate()?;
    let n = problem.dimension();
    if x0.len() != n {
        return Err(SolveError::Dimension { expected: n, got: x0.len() });
    }
    let m_h = problem.num_equalities();
    let m_g = problem.num_inequalities();
    let (lower, upper) = problem.inequality_bounds();

    let pool = if params.threads > 1 {
        rayon::ThreadPoolBuilder::new().num_threads(params.threads).build().ok()
    } else {
        None
    };

    let mut ids = vec![FunctionId::Objective];
    ids.extend((0..m_h).map(FunctionId::Equality));
    ids.extend((0..m_g).map(FunctionId::Inequality));

    let mut x = x0.to_vec();
    let mut rho = params.rho0;
    let mut eps = params.eps0;
    let mut tau = params.tau0;
    let mut hess = LbfgsHessian::with_bounds(n, params.lbfgs_memory, H_MIN, H_MAX);
    let mut trace = Trace::default();
    let mut prev: Option<(Vec<f64>, Derivatives)> = None;
    let mut last_delta_q: Option<f64> = None;
    let mut ls_failures = 0usize;

    let eval_err = |k: usize, e: EvalError, trace: &Trace| SolveError::Evaluation {
        iteration: k,
        source: e,
        trace: trace.clone(),
    };

    let mut status = Status::IterationLimit;
    let mut k = 1usize;
    let mut current: Option<(Values, Derivatives)> = None;

    loop {
        let mut timer = Timer {
            enabled: params.profile,
            phases: Vec::new(),
        };
        let (values, derivs) = match current.take() {
            Some(vd) => vd,
            None => {
                let vd = timer
                    .time("evaluate", || problem.evaluate(&x))
                    .map_err(|e| eval_err(k, e, &trace))?;
                check_finite(&vd.0).map_err(|e| eval_err(k, e, &trace))?;
                vd
            }
        };
        let (merit0, sigma_max) = merit_of(&values, &lower, &upper, rho);

        if let Some(dq) = last_delta_q {
            if dq < params.nu_s && sigma_max < params.nu_in {
                status = Status::Converged;
                current = Some((values, derivs));
                break;
            }
        }
        if k > params.k_max {
            current = Some((values, derivs));
            break;
        }

        // Gradient sampling.
        let sample_ids: Vec<(FunctionId, usize)> = ids
            .iter()
            .map(|&id| (id, problem.sample_size(id, params.p)))
            .filter(|&(_, c)| c > 0)
            .collect();
        let mut sample_note = None;
        let sampled: Vec<(FunctionId, Vec<DVector<f64>>)> = timer.time("sampling", || {
            let run = |&(id, count): &(FunctionId, usize)| {
                sampled_gradients(problem, id, &x, eps, count, params.seed, k, m_h).map(|g| (id, g))
            };
            let results: Vec<Result<_, EvalError>> = match &pool {
                Some(pool) => pool.install(|| sample_ids.par_iter().map(run).collect()),
                None => sample_ids.iter().map(run).collect(),
            };
            let mut ok = Vec::new();
            for r in results {
                match r {
                    Ok(v) => ok.push(v),
                    Err(e) => sample_note = Some(format!("sampled gradient failed: {e}")),
                }
            }
            ok
        });

        let eta_monitor = timer.time("monitor", || problem.monitor(&x, params.log_modes));

        let mut record = IterationRecord {
            k,
            f: values.f,
            sigma_max,
            delta_q: 0.0,
            beta: 0.0,
            eps,
            rho,
            tau,
            eta: eta_monitor.eta,
            modes: if params.log_modes { eta_monitor.modes } else { None },
            qp_kkt: None,
            merit: Some(merit0),
            merit_trial: None,
            note: None,
            profile: None,
        };

        if let Some(note) = sample_note {
            // Abort the iteration as a null step.
            record.note = Some(note);
            eps *= params.mu_eps;
            last_delta_q = None;
            record.profile = finish_profile(params.profile, timer, problem);
            trace.push(record);
            current = Some((values, derivs));
            k += 1;
            continue;
        }

        let model = build_model(&values, &derivs, &lower, &upper, sampled);
        let (qp_sol, h_used) = match timer.time("qp", || {
            build_subproblem(&model, hess.matrix(), rho).solve(params.qp_tol)
        }) {
            Ok(sol) => (sol, hess.matrix().clone()),
            Err(_) => {
                hess.reset();
                match timer.time("qp", || build_subproblem(&model, hess.matrix(), rho).solve(params.qp_tol)) {
                    Ok(sol) => {
                        record.note = Some("QP retried with identity Hessian".into());
                        (sol, hess.matrix().clone())
                    }
                    Err(e) => {
                        record.note = Some(e.to_string());
                        trace.push(record);
                        status = Status::QpFailure;
                        current = Some((values, derivs));
                        break;
                    }
                }
            }
        };
        record.qp_kkt = Some(qp_sol.kkt_residual);

        // L-BFGS update from the last displacement.
        timer.time("lbfgs", || {
            if let Some((xp, dp)) = &prev {
                let s = DVector::from_iterator(n, x.iter().zip(xp).map(|(a, b)| a - b));
                let g_now = lagrangian_gradient(&derivs, rho, &qp_sol.equality_multipliers, &qp_sol.inequality_multipliers);
                let g_prev = lagrangian_gradient(dp, rho, &qp_sol.equality_multipliers, &qp_sol.inequality_multipliers);
                hess.update(&s, &(g_now - g_prev));
            }
        });

        let d = qp_sol.d.clone();
        let delta_q = model_reduction(&model, &h_used, rho, &d);
        record.delta_q = delta_q;
        last_delta_q = Some(delta_q);

        let mut x_next = x.clone();
        let mut next_state: Option<(Values, Derivatives)> = None;
        let mut take_null_step = true;
        if delta_q > params.nu_s * eps * eps {
            let ls = timer.time("line_search", || line_search(problem, &x, &d, merit0, delta_q, rho, params, &lower, &upper));
            match ls {
                Some((beta, xt, mt)) => {
                    record.beta = beta;
                    record.merit_trial = Some(mt);
                    x_next = xt;
                    take_null_step = false;
                    ls_failures = 0;
                }
                None => {
                    ls_failures += 1;
                    record.note = Some("line search failed".into());
                }
            }
        }
        if take_null_step {
            if sigma_max <= tau {
                tau *= params.mu_tau;
            } else {
                rho *= params.mu_rho;
            }
            eps *= params.mu_eps;
            next_state = Some((values.clone(), derivs.clone()));
        }

        record.profile = finish_profile(params.profile, timer, problem);
        observer.on_iteration(&StepEvent {
            x: &x,
            x_next: &x_next,
            d: &d,
            hessian: &h_used,
            qp: &qp_sol,
            record: &record,
            varpi: params.varpi,
        });
        trace.push(record);

        if ls_failures >= MAX_LINE_SEARCH_FAILURES {
            status = Status::LineSearchFailure;
            current = Some((values, derivs));
            break;
        }

        prev = Some((x.clone(), derivs));
        x = x_next;
        current = next_state;
        k += 1;
    }

    let (values, _) = match current {
        Some(vd) => vd,
        None => problem.evaluate(&x).map_err(|e| eval_err(k, e, &trace))?,
    };
    let (_, sigma_max) = merit_of(&values, &lower, &upper, rho);
    Ok(SolveResult {
        f: values.f,
        x,
        values,
        sigma_max,
        status,
        trace,
        rho,
        eps,
        tau,
    })
}

fn finish_profile<P: NlpProblem + ?Sized>(enabled: bool, timer: Timer, problem: &P) -> Option<Vec<(String, f64)>> {
    if !enabled {
        return None;
    }
    let mut phases = timer.phases;
    phases.extend(problem.take_profile());
    Some(phases)
}

fn build_model(
    values: &Values,
    derivs: &Derivatives,
    lower: &[f64],
    upper: &[f64],
    sampled: Vec<(FunctionId, Vec<DVector<f64>>)>,
) -> LinearModel {
    let anchor = |id: FunctionId, value: f64| FunctionModel::smooth(value, DVector::from_vec(derivs.gradient(id)));
    let mut model = LinearModel {
        objective: anchor(FunctionId::Objective, values.f),
        equalities: values.h.iter().enumerate().map(|(i, &v)| anchor(FunctionId::Equality(i), v)).collect(),
        inequalities: values.g.iter().enumerate().map(|(j, &v)| anchor(FunctionId::Inequality(j), v)).collect(),
        lower: lower.to_vec(),
        upper: upper.to_vec(),
    };
    for (id, grads) in sampled {
        let target = match id {
            FunctionId::Objective => &mut model.objective,
            FunctionId::Equality(i) => &mut model.equalities[i],
            FunctionId::Inequality(j) => &mut model.inequalities[j],
        };
        target.gradients.extend(grads);
    }
    model
}

/// Backtracking on `{1, γ, γ², …}`; returns `(β, x + βd, merit)` or `None`
/// once β falls below [`BETA_MIN`].
#[allow(clippy::too_many_arguments)]
fn line_search<P: NlpProblem + ?Sized>(
    problem: &P,
    x: &[f64],
    d: &DVector<f64>,
    merit0: f64,
    delta_q: f64,
    rho: f64,
    params: &SolverParams,
    lower: &[f64],
    upper: &[f64],
) -> Option<(f64, Vec<f64>, f64)> {
    let mut beta = 1.0;
    while beta >= BETA_MIN {
        let xt: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + beta * b).collect();
        if let Ok(v) = problem.values(&xt) {
            if check_finite(&v).is_ok() {
                let (mt, _) = merit_of(&v, lower, upper, rho);
                if mt <= merit0 - params.varpi * beta * delta_q {
                    return Some((beta, xt, mt));
                }
            }
        }
        beta *= params.gamma;
    }
    None
}
