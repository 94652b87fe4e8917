//! Bus power injections `P_i = Σ_j V_i V_j Y_ij cos(θ_i − θ_j − α_ij)` and
//! `Q_i = Σ_j V_i V_j Y_ij sin(θ_i − θ_j − α_ij)`, written with
//! `Y_ij e^{jα_ij} = G_ij + jB_ij`, and a Newton power flow.

use nalgebra::{DMatrix, DVector};

use crate::case::{build_admittance, NetworkCase};

#[derive(Debug, Clone)]
pub struct Network {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Off-diagonal nonzero pattern of the admittance matrix.
    pub neighbors: Vec<Vec<usize>>,
}

/// `u(t)`, `u'(t)`, `u''(t)` of the angle factor in a pair term.
#[inline]
pub(crate) fn p_factor(g: f64, b: f64, t: f64) -> (f64, f64, f64) {
    let (s, c) = t.sin_cos();
    let u = g * c + b * s;
    (u, -g * s + b * c, -u)
}

#[inline]
pub(crate) fn q_factor(g: f64, b: f64, t: f64) -> (f64, f64, f64) {
    let (s, c) = t.sin_cos();
    let u = g * s - b * c;
    (u, g * c + b * s, -u)
}

impl Network {
    pub fn new(case: &NetworkCase) -> Self {
        let y = build_admittance(case);
        let n = case.num_buses();
        let g = y.conductance();
        let b = y.susceptance();
        let neighbors = (0..n)
            .map(|i| (0..n).filter(|&j| j != i && (g[(i, j)] != 0.0 || b[(i, j)] != 0.0)).collect())
            .collect();
        Self { g, b, neighbors }
    }

    pub fn num_buses(&self) -> usize {
        self.g.nrows()
    }

    pub fn injections(&self, v: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.num_buses();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for i in 0..n {
            p[i] = v[i] * v[i] * self.g[(i, i)];
            q[i] = -v[i] * v[i] * self.b[(i, i)];
            for &j in &self.neighbors[i] {
                let t = theta[i] - theta[j];
                let (gij, bij) = (self.g[(i, j)], self.b[(i, j)]);
                p[i] += v[i] * v[j] * p_factor(gij, bij, t).0;
                q[i] += v[i] * v[j] * q_factor(gij, bij, t).0;
            }
        }
        (p, q)
    }

    /// Dense Jacobians `(∂P/∂θ, ∂P/∂V, ∂Q/∂θ, ∂Q/∂V)`.
    pub fn injection_jacobian(&self, v: &[f64], theta: &[f64]) -> [DMatrix<f64>; 4] {
        let n = self.num_buses();
        let mut pt = DMatrix::zeros(n, n);
        let mut pv = DMatrix::zeros(n, n);
        let mut qt = DMatrix::zeros(n, n);
        let mut qv = DMatrix::zeros(n, n);
        for i in 0..n {
            pv[(i, i)] += 2.0 * v[i] * self.g[(i, i)];
            qv[(i, i)] -= 2.0 * v[i] * self.b[(i, i)];
            for &j in &self.neighbors[i] {
                let t = theta[i] - theta[j];
                let (gij, bij) = (self.g[(i, j)], self.b[(i, j)]);
                let (up, dup, _) = p_factor(gij, bij, t);
                let (uq, duq, _) = q_factor(gij, bij, t);
                pt[(i, i)] += v[i] * v[j] * dup;
                pt[(i, j)] -= v[i] * v[j] * dup;
                pv[(i, i)] += v[j] * up;
                pv[(i, j)] += v[i] * up;
                qt[(i, i)] += v[i] * v[j] * duq;
                qt[(i, j)] -= v[i] * v[j] * duq;
                qv[(i, i)] += v[j] * uq;
                qv[(i, j)] += v[i] * uq;
            }
        }
        [pt, pv, qt, qv]
    }
}

/// Converged AC power flow.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    /// Generator outputs (the reference-bus machine takes up the balance).
    pub pg: Vec<f64>,
    pub qg: Vec<f64>,
    pub iterations: usize,
    pub mismatch: f64,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum PowerFlowError {
    #[error("the angle reference bus has no generator")]
    NoSlack,
    #[error("power flow did not converge (mismatch {mismatch:.3e} after {iterations} iterations)")]
    NotConverged { iterations: usize, mismatch: f64 },
    #[error("power flow Jacobian is singular")]
    Singular,
}

/// Solves the power flow with generator real outputs `pg` (the value for the
/// reference-bus machine is ignored) and generator voltage setpoints `vset`.
pub fn solve_power_flow(
    case: &NetworkCase,
    net: &Network,
    pg: &[f64],
    vset: &[f64],
    tol: f64,
) -> Result<PowerFlowSolution, PowerFlowError> {
    let n = case.num_buses();
    let r = case.reference_bus();
    let gen_at = case.generator_at_bus();
    if gen_at[r].is_none() {
        return Err(PowerFlowError::NoSlack);
    }
    let mut v = vec![1.0; n];
    let theta0 = vec![0.0; n];
    let mut theta = theta0;
    let mut p_spec = vec![0.0; n];
    for (i, bus) in case.buses.iter().enumerate() {
        p_spec[i] = -bus.pl;
        if let Some(k) = gen_at[i] {
            v[i] = vset[k];
            p_spec[i] += pg[k];
        }
    }
    let ang: Vec<usize> = (0..n).filter(|&i| i != r).collect();
    let mag: Vec<usize> = (0..n).filter(|&i| gen_at[i].is_none()).collect();
    let m = ang.len() + mag.len();

    let mismatch_of = |v: &[f64], theta: &[f64]| {
        let (p, q) = net.injections(v, theta);
        let mut f = DVector::zeros(m);
        for (k, &i) in ang.iter().enumerate() {
            f[k] = p[i] - p_spec[i];
        }
        for (k, &i) in mag.iter().enumerate() {
            f[ang.len() + k] = q[i] + case.buses[i].ql;
        }
        f
    };

    let max_iter = 30;
    let mut f = mismatch_of(&v, &theta);
    let mut iterations = 0;
    while f.amax() > tol {
        if iterations == max_iter {
            return Err(PowerFlowError::NotConverged {
                iterations,
                mismatch: f.amax(),
            });
        }
        let [pt, pv, qt, qv] = net.injection_jacobian(&v, &theta);
        let mut jac = DMatrix::zeros(m, m);
        for (a, &i) in ang.iter().enumerate() {
            for (b, &j) in ang.iter().enumerate() {
                jac[(a, b)] = pt[(i, j)];
            }
            for (b, &j) in mag.iter().enumerate() {
                jac[(a, ang.len() + b)] = pv[(i, j)];
            }
        }
        for (a, &i) in mag.iter().enumerate() {
            for (b, &j) in ang.iter().enumerate() {
                jac[(ang.len() + a, b)] = qt[(i, j)];
            }
            for (b, &j) in mag.iter().enumerate() {
                jac[(ang.len() + a, ang.len() + b)] = qv[(i, j)];
            }
        }
        let dx = jac.lu().solve(&(-&f)).ok_or(PowerFlowError::Singular)?;
        for (k, &i) in ang.iter().enumerate() {
            theta[i] += dx[k];
        }
        for (k, &i) in mag.iter().enumerate() {
            v[i] += dx[ang.len() + k];
        }
        f = mismatch_of(&v, &theta);
        iterations += 1;
        if !f.iter().all(|x| x.is_finite()) {
            return Err(PowerFlowError::NotConverged {
                iterations,
                mismatch: f64::INFINITY,
            });
        }
    }

    let (p, q) = net.injections(&v, &theta);
    let gen_buses = case.generator_buses();
    let pg_out = gen_buses.iter().map(|&i| p[i] + case.buses[i].pl).collect();
    let qg_out = gen_buses.iter().map(|&i| q[i] + case.buses[i].ql).collect();
    Ok(PowerFlowSolution {
        v,
        theta,
        pg: pg_out,
        qg: qg_out,
        iterations,
        mismatch: f.amax(),
    })
}
