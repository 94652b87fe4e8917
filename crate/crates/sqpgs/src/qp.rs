//! Dense primal-dual interior-point solver for convex quadratic programs
//!
//! Solves
//!
//! ```text
//! minimize    ½ vᵀQv + cᵀv
//! subject to  G v ≤ h
//! ```
//!
//! with `Q` symmetric positive semidefinite, using Mehrotra's
//! predictor-corrector method on the normal equations
//! `(Q + Gᵀ diag(λ/s) G) Δv = r`.

use nalgebra::{DMatrix, DVector};

use crate::SolveError;

/// A convex QP in inequality form.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

/// Primal-dual solution of a [`QpProblem`].
#[derive(Debug, Clone)]
pub struct QpResult {
    pub x: DVector<f64>,
    /// One multiplier per row of `G`.
    pub lambda: DVector<f64>,
    pub objective: f64,
    pub kkt: KktResidual,
    pub iterations: usize,
}

/// Scaled optimality residuals of a primal-dual pair.
///
/// * stationarity: `‖Qv + c + Gᵀλ‖∞ / (1 + ‖c‖∞)`
/// * primal: `‖max(Gv − h, 0)‖∞ / (1 + ‖h‖∞)`
/// * dual: `‖max(−λ, 0)‖∞`
/// * complementarity: `maxᵢ |λᵢ (h − Gv)ᵢ| / (1 + |objective|)`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResidual {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

impl QpProblem {
    pub fn num_variables(&self) -> usize {
        self.c.len()
    }

    pub fn num_rows(&self) -> usize {
        self.h.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q * x)) + self.c.dot(x)
    }

    /// Residuals of the KKT conditions at `(x, lambda)`.
    pub fn kkt_residual(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> KktResidual {
        let grad = &self.q * x + &self.c + self.g.tr_mul(lambda);
        let slack = &self.h - &self.g * x;
        let c_scale = 1.0 + self.c.amax();
        let h_scale = 1.0 + self.h.amax();
        let obj_scale = 1.0 + self.objective(x).abs();
        let primal = slack.iter().fold(0.0_f64, |m, &s| m.max(-s));
        let dual = lambda.iter().fold(0.0_f64, |m, &l| m.max(-l));
        let comp = lambda
            .iter()
            .zip(slack.iter())
            .fold(0.0_f64, |m, (&l, &s)| m.max((l * s).abs()));
        KktResidual {
            stationarity: grad.amax() / c_scale,
            primal: primal / h_scale,
            dual,
            complementarity: comp / obj_scale,
        }
    }
}

/// Iteration cap for the interior-point loop.
pub const QP_MAX_ITER: usize = 200;

/// Solves `qp` to a KKT residual of at most `tol`.
pub fn solve_qp(qp: &QpProblem, tol: f64) -> Result<QpResult, SolveError> {
    let n = qp.num_variables();
    let m = qp.num_rows();
    assert_eq!(qp.q.nrows(), n);
    assert_eq!(qp.g.ncols(), n);
    assert_eq!(qp.g.nrows(), m);

    if m == 0 {
        let x = solve_spd(&qp.q, &(-&qp.c)).ok_or_else(|| SolveError::Qp {
            message: "unconstrained QP has a singular Hessian".into(),
            residual: f64::INFINITY,
        })?;
        let lambda = DVector::zeros(0);
        let kkt = qp.kkt_residual(&x, &lambda);
        return Ok(QpResult {
            objective: qp.objective(&x),
            x,
            lambda,
            kkt,
            iterations: 0,
        });
    }

    // Starting point: least-squares solve of the relaxed problem, then shift
    // slacks and multipliers into the positive orthant.
    let gtg = qp.g.tr_mul(&qp.g);
    let m0 = &qp.q + &gtg;
    let rhs0 = -&qp.c + qp.g.tr_mul(&qp.h);
    let mut x = solve_spd(&m0, &rhs0).unwrap_or_else(|| DVector::zeros(n));
    let s_hat = &qp.h - &qp.g * &x;
    let mut s = shift_positive(&s_hat);
    let mut lambda = shift_positive(&(-&s_hat));

    let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
    let mut acceptable: Option<QpResult> = None;
    for iter in 0..QP_MAX_ITER {
        let kkt = qp.kkt_residual(&x, &lambda);
        let res = kkt.max();
        if best.as_ref().is_none_or(|(r, _, _)| res < *r) {
            best = Some((res, x.clone(), lambda.clone()));
        }
        if res <= tol {
            let objective = qp.objective(&x);
            // Also require the summed complementarity gap to be small.
            let gap = (&qp.h - &qp.g * &x).dot(&lambda).abs() / (1.0 + objective.abs());
            let result = QpResult {
                objective,
                x: x.clone(),
                lambda: lambda.clone(),
                kkt,
                iterations: iter,
            };
            if gap <= tol {
                return Ok(result);
            }
            acceptable = Some(result);
        }

        let r_d = &qp.q * &x + &qp.c + qp.g.tr_mul(&lambda);
        let r_p = &qp.g * &x + &s - &qp.h;
        let mu = s.dot(&lambda) / m as f64;

        let w = lambda.component_div(&s);
        let mut gw = qp.g.clone();
        for (mut row, wi) in gw.row_iter_mut().zip(w.iter()) {
            row *= *wi;
        }
        let mut normal = &qp.q + qp.g.tr_mul(&gw);
        symmetrize(&mut normal);
        let factor = NormalFactor::new(normal).ok_or_else(|| SolveError::Qp {
            message: "normal equations are singular".into(),
            residual: res,
        })?;

        let direction = |r_c: &DVector<f64>| {
            let t = (r_c - lambda.component_mul(&r_p)).component_div(&s);
            let rhs = -&r_d + qp.g.tr_mul(&t);
            let dx = factor.solve(&rhs);
            let ds = -&r_p - &qp.g * &dx;
            let dl = (-r_c - lambda.component_mul(&ds)).component_div(&s);
            (dx, ds, dl)
        };

        // Predictor.
        let r_c_aff = s.component_mul(&lambda);
        let (_, ds_aff, dl_aff) = direction(&r_c_aff);
        let alpha_aff = max_step(&s, &ds_aff).min(max_step(&lambda, &dl_aff)).min(1.0);
        let mu_aff = (&s + alpha_aff * &ds_aff).dot(&(&lambda + alpha_aff * &dl_aff)) / m as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        // Corrector.
        let r_c = &r_c_aff + ds_aff.component_mul(&dl_aff) - DVector::from_element(m, sigma * mu);
        let (dx, ds, dl) = direction(&r_c);
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&lambda, &dl))).min(1.0);

        x += alpha * dx;
        s += alpha * ds;
        lambda += alpha * dl;
        for si in s.iter_mut() {
            *si = si.max(1e-300);
        }
        for li in lambda.iter_mut() {
            *li = li.max(1e-300);
        }
        if !x.iter().all(|v| v.is_finite()) {
            break;
        }
    }
    if let Some(result) = acceptable {
        return Ok(result);
    }
    let residual = best.map(|(r, _, _)| r).unwrap_or(f64::INFINITY);
    Err(SolveError::Qp {
        message: format!("interior-point iteration cap ({QP_MAX_ITER}) reached"),
        residual,
    })
}

fn shift_positive(v: &DVector<f64>) -> DVector<f64> {
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        v.clone()
    } else {
        v.add_scalar(1.0 - min)
    }
}

/// Largest `α ∈ (0, ∞]` with `v + α dv ≥ 0`.
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, &d)| d < 0.0)
        .map(|(&vi, &d)| -vi / d)
        .fold(f64::INFINITY, f64::min)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let a = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = a;
            m[(j, i)] = a;
        }
    }
}

enum NormalFactor {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl NormalFactor {
    fn new(m: DMatrix<f64>) -> Option<Self> {
        if let Some(ch) = m.clone().cholesky() {
            return Some(Self::Cholesky(ch));
        }
        // Tiny diagonal regularization, then fall back to LU.
        let scale = m.diagonal().amax().max(1.0);
        let mut reg = m.clone();
        for i in 0..reg.nrows() {
            reg[(i, i)] += 1e-14 * scale;
        }
        if let Some(ch) = reg.cholesky() {
            return Some(Self::Cholesky(ch));
        }
        let lu = m.lu();
        if lu.is_invertible() {
            Some(Self::Lu(lu))
        } else {
            None
        }
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Cholesky(ch) => ch.solve(rhs),
            Self::Lu(lu) => lu.solve(rhs).unwrap_or_else(|| DVector::zeros(rhs.len())),
        }
    }
}

fn solve_spd(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    NormalFactor::new(m.clone()).map(|f| f.solve(rhs))
}
