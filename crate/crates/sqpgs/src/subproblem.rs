//! The penalty QP subproblem, the infeasibility vector and the model
//! reduction used for step acceptance and termination.

use nalgebra::{DMatrix, DVector};

use crate::problem::Values;
use crate::qp::{solve_qp, QpProblem};
use crate::SolveError;

/// Value of a function at the iterate and its gradients at every sample
/// point (the first gradient is the one at the iterate itself).
#[derive(Debug, Clone)]
pub struct FunctionModel {
    pub value: f64,
    pub gradients: Vec<DVector<f64>>,
}

impl FunctionModel {
    pub fn smooth(value: f64, gradient: DVector<f64>) -> Self {
        Self {
            value,
            gradients: vec![gradient],
        }
    }

    fn max_linearization(&self, d: &DVector<f64>) -> f64 {
        self.gradients
            .iter()
            .map(|g| self.value + g.dot(d))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Sampled linearizations of all problem functions at one iterate.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub objective: FunctionModel,
    pub equalities: Vec<FunctionModel>,
    pub inequalities: Vec<FunctionModel>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LinearModel {
    pub fn dimension(&self) -> usize {
        self.objective.gradients[0].len()
    }

    #[cfg(test)]
    fn values(&self) -> Values {
        Values {
            f: self.objective.value,
            h: self.equalities.iter().map(|m| m.value).collect(),
            g: self.inequalities.iter().map(|m| m.value).collect(),
        }
    }
}

/// Which linearization a QP row encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Objective { sample: usize },
    EqualityPlus { index: usize, sample: usize },
    EqualityMinus { index: usize, sample: usize },
    Upper { index: usize, sample: usize },
    Lower { index: usize, sample: usize },
    Nonnegative { variable: usize },
}

/// The assembled QP in the variables `(d, z, e, r_upper, r_lower)`.
#[derive(Debug, Clone)]
pub struct Subproblem {
    pub qp: QpProblem,
    pub rows: Vec<RowKind>,
    n: usize,
    m_h: usize,
    upper_slack: Vec<Option<usize>>,
    lower_slack: Vec<Option<usize>>,
}

/// Solution of a [`Subproblem`] with multipliers aggregated per function.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub d: DVector<f64>,
    pub z: f64,
    pub e: Vec<f64>,
    pub r_upper: Vec<f64>,
    pub r_lower: Vec<f64>,
    /// Raw multiplier of every QP row, in [`Subproblem::rows`] order.
    pub row_multipliers: Vec<f64>,
    /// Sum of objective-row multipliers (equals `ρ` at a KKT point).
    pub objective_multiplier: f64,
    /// `Σ_samples (μ⁺ − μ⁻)` per equality.
    pub equality_multipliers: Vec<f64>,
    /// `Σ_samples (μ_upper − μ_lower)` per inequality.
    pub inequality_multipliers: Vec<f64>,
    pub kkt_residual: f64,
}

/// Builds the penalty QP
///
/// ```text
/// min  ρz + Σ(r̄ + r̲) + Σe + ½dᵀHd
/// s.t. f + ∇f(x_b)ᵀd ≤ z              every sample b of f
///      ±(hᵢ + ∇hᵢ(x_b)ᵀd) ≤ eᵢ          every sample b of hᵢ
///      gⱼ + ∇gⱼ(x_b)ᵀd ≤ r̄ⱼ + ḡⱼ         every sample b of gⱼ
///      −gⱼ − ∇gⱼ(x_b)ᵀd ≤ r̲ⱼ − g̲ⱼ        every sample b of gⱼ
///      e, r̄, r̲ ≥ 0
/// ```
///
/// Slacks for infinite bounds are omitted together with their rows.
pub fn build_subproblem(model: &LinearModel, hessian: &DMatrix<f64>, rho: f64) -> Subproblem {
    let n = model.dimension();
    let m_h = model.equalities.len();
    let m_g = model.inequalities.len();
    let z_col = n;
    let e_off = n + 1;
    let mut next = e_off + m_h;
    let mut upper_slack = vec![None; m_g];
    let mut lower_slack = vec![None; m_g];
    for j in 0..m_g {
        if model.upper[j].is_finite() {
            upper_slack[j] = Some(next);
            next += 1;
        }
    }
    for j in 0..m_g {
        if model.lower[j].is_finite() {
            lower_slack[j] = Some(next);
            next += 1;
        }
    }
    let nv = next;

    let mut rows: Vec<RowKind> = Vec::new();
    let mut coeffs: Vec<(Vec<(usize, f64)>, &DVector<f64>, f64)> = Vec::new();
    // Each entry: (sparse slack coefficients, gradient (with sign folded in later), rhs).
    let mut signs: Vec<f64> = Vec::new();

    for (b, grad) in model.objective.gradients.iter().enumerate() {
        rows.push(RowKind::Objective { sample: b });
        coeffs.push((vec![(z_col, -1.0)], grad, -model.objective.value));
        signs.push(1.0);
    }
    for (i, fm) in model.equalities.iter().enumerate() {
        for (b, grad) in fm.gradients.iter().enumerate() {
            rows.push(RowKind::EqualityPlus { index: i, sample: b });
            coeffs.push((vec![(e_off + i, -1.0)], grad, -fm.value));
            signs.push(1.0);
            rows.push(RowKind::EqualityMinus { index: i, sample: b });
            coeffs.push((vec![(e_off + i, -1.0)], grad, fm.value));
            signs.push(-1.0);
        }
    }
    for (j, fm) in model.inequalities.iter().enumerate() {
        for (b, grad) in fm.gradients.iter().enumerate() {
            if let Some(col) = upper_slack[j] {
                rows.push(RowKind::Upper { index: j, sample: b });
                coeffs.push((vec![(col, -1.0)], grad, model.upper[j] - fm.value));
                signs.push(1.0);
            }
            if let Some(col) = lower_slack[j] {
                rows.push(RowKind::Lower { index: j, sample: b });
                coeffs.push((vec![(col, -1.0)], grad, fm.value - model.lower[j]));
                signs.push(-1.0);
            }
        }
    }
    let n_lin = rows.len();
    let n_slack = nv - e_off;
    let m = n_lin + n_slack;

    let mut g = DMatrix::zeros(m, nv);
    let mut h = DVector::zeros(m);
    for (r, ((slacks, grad, rhs), sign)) in coeffs.iter().zip(&signs).enumerate() {
        for c in 0..n {
            g[(r, c)] = sign * grad[c];
        }
        for &(col, v) in slacks {
            g[(r, col)] = v;
        }
        h[r] = *rhs;
    }
    for k in 0..n_slack {
        let r = n_lin + k;
        g[(r, e_off + k)] = -1.0;
        rows.push(RowKind::Nonnegative { variable: e_off + k });
    }

    let mut q = DMatrix::zeros(nv, nv);
    q.view_mut((0, 0), (n, n)).copy_from(hessian);
    let mut c = DVector::zeros(nv);
    c[z_col] = rho;
    for k in e_off..nv {
        c[k] = 1.0;
    }

    Subproblem {
        qp: QpProblem { q, c, g, h },
        rows,
        n,
        m_h,
        upper_slack,
        lower_slack,
    }
}

impl Subproblem {
    pub fn num_variables(&self) -> usize {
        self.qp.num_variables()
    }

    /// Count of linearization rows (excluding slack nonnegativity rows).
    pub fn num_linearization_rows(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| !matches!(r, RowKind::Nonnegative { .. }))
            .count()
    }

    pub fn solve(&self, tol: f64) -> Result<QpSolution, SolveError> {
        let res = solve_qp(&self.qp, tol)?;
        let v = &res.x;
        let n = self.n;
        let d = v.rows(0, n).into_owned();
        let z = v[n];
        let e: Vec<f64> = (0..self.m_h).map(|i| v[n + 1 + i]).collect();
        let pick = |s: &Option<usize>| s.map(|c| v[c]).unwrap_or(0.0);
        let r_upper = self.upper_slack.iter().map(pick).collect();
        let r_lower = self.lower_slack.iter().map(pick).collect();

        let mut objective_multiplier = 0.0;
        let mut equality_multipliers = vec![0.0; self.m_h];
        let mut inequality_multipliers = vec![0.0; self.upper_slack.len()];
        for (row, &mu) in self.rows.iter().zip(res.lambda.iter()) {
            match *row {
                RowKind::Objective { .. } => objective_multiplier += mu,
                RowKind::EqualityPlus { index, .. } => equality_multipliers[index] += mu,
                RowKind::EqualityMinus { index, .. } => equality_multipliers[index] -= mu,
                RowKind::Upper { index, .. } => inequality_multipliers[index] += mu,
                RowKind::Lower { index, .. } => inequality_multipliers[index] -= mu,
                RowKind::Nonnegative { .. } => {}
            }
        }
        Ok(QpSolution {
            d,
            z,
            e,
            r_upper,
            r_lower,
            row_multipliers: res.lambda.iter().copied().collect(),
            objective_multiplier,
            equality_multipliers,
            inequality_multipliers,
            kkt_residual: res.kkt.max(),
        })
    }
}

/// Infeasibility vector `(|h|; max(g − ḡ, 0); max(g̲ − g, 0))`.
pub fn infeasibility(values: &Values, lower: &[f64], upper: &[f64]) -> Vec<f64> {
    let mut sigma: Vec<f64> = values.h.iter().map(|v| v.abs()).collect();
    sigma.extend(values.g.iter().zip(upper).map(|(g, u)| (g - u).max(0.0)));
    sigma.extend(values.g.iter().zip(lower).map(|(g, l)| (l - g).max(0.0)));
    sigma
}

/// Merit function `ρf + Σσ`.
pub fn merit(values: &Values, lower: &[f64], upper: &[f64], rho: f64) -> f64 {
    rho * values.f + infeasibility(values, lower, upper).iter().sum::<f64>()
}

/// Reduction of the sampled penalty model achieved by `d`:
///
/// ```text
/// Δq = ρf + Σσ − ρ max_b(f + ∇f_bᵀd) − ½dᵀHd − Σᵢ max_b |hᵢ + ∇hᵢ,bᵀd|
///      − Σⱼ max_b max(gⱼ + ∇gⱼ,bᵀd − ḡⱼ, 0) − Σⱼ max_b max(g̲ⱼ − gⱼ − ∇gⱼ,bᵀd, 0)
/// ```
pub fn model_reduction(model: &LinearModel, hessian: &DMatrix<f64>, rho: f64, d: &DVector<f64>) -> f64 {
    // Accumulated term by term so that d = 0 gives exactly zero.
    let f = model.objective.value;
    let mut dq = rho * (f - model.objective.max_linearization(d)) - 0.5 * d.dot(&(hessian * d));
    for fm in &model.equalities {
        let worst = fm
            .gradients
            .iter()
            .map(|g| (fm.value + g.dot(d)).abs())
            .fold(0.0, f64::max);
        dq += fm.value.abs() - worst;
    }
    for (j, fm) in model.inequalities.iter().enumerate() {
        let (lo, up) = (model.lower[j], model.upper[j]);
        if up.is_finite() {
            let worst = fm
                .gradients
                .iter()
                .map(|g| (fm.value + g.dot(d) - up).max(0.0))
                .fold(0.0, f64::max);
            dq += (fm.value - up).max(0.0) - worst;
        }
        if lo.is_finite() {
            let worst = fm
                .gradients
                .iter()
                .map(|g| (lo - fm.value - g.dot(d)).max(0.0))
                .fold(0.0, f64::max);
            dq += (lo - fm.value).max(0.0) - worst;
        }
    }
    dq
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(x: f64) -> LinearModel {
        LinearModel {
            objective: FunctionModel::smooth(x, DVector::from_vec(vec![1.0])),
            equalities: vec![],
            inequalities: vec![],
            lower: vec![],
            upper: vec![],
        }
    }

    #[test]
    fn scalar_epigraph_step() {
        let model = scalar_model(2.0);
        let h = DMatrix::identity(1, 1);
        let sub = build_subproblem(&model, &h, 1.0);
        let sol = sub.solve(1e-10).unwrap();
        assert!((sol.d[0] + 1.0).abs() < 1e-9);
        assert!((sol.z - 1.0).abs() < 1e-9);
        assert!(sol.kkt_residual <= 1e-10);
        let dq = model_reduction(&model, &h, 1.0, &sol.d);
        assert!((dq - 0.5).abs() < 1e-9);
    }

    #[test]
    fn zero_step_has_zero_reduction() {
        let model = LinearModel {
            objective: FunctionModel::smooth(3.0, DVector::from_vec(vec![1.0, -2.0])),
            equalities: vec![FunctionModel::smooth(0.4, DVector::from_vec(vec![1.0, 1.0]))],
            inequalities: vec![FunctionModel::smooth(2.0, DVector::from_vec(vec![0.0, 1.0]))],
            lower: vec![0.0],
            upper: vec![1.0],
        };
        let h = DMatrix::identity(2, 2);
        assert_eq!(model_reduction(&model, &h, 0.1, &DVector::zeros(2)), 0.0);
    }

    #[test]
    fn infeasibility_definition() {
        let v = Values {
            f: 0.0,
            h: vec![0.3],
            g: vec![1.5],
        };
        assert_eq!(infeasibility(&v, &[0.0], &[1.0]), vec![0.3, 0.5, 0.0]);
        let feasible = Values {
            f: 1.0,
            h: vec![0.0],
            g: vec![0.5],
        };
        assert!(infeasibility(&feasible, &[0.0], &[1.0]).iter().all(|&s| s == 0.0));
    }

    #[test]
    fn sampled_rows_and_infinite_bounds() {
        let g0 = DVector::from_vec(vec![1.0, 0.0]);
        let model = LinearModel {
            objective: FunctionModel::smooth(0.0, DVector::from_vec(vec![1.0, 1.0])),
            equalities: vec![],
            inequalities: vec![FunctionModel {
                value: 0.0,
                gradients: vec![g0.clone(), g0.clone(), g0],
            }],
            lower: vec![f64::NEG_INFINITY],
            upper: vec![1.0],
        };
        let sub = build_subproblem(&model, &DMatrix::identity(2, 2), 1.0);
        // one objective row + three upper rows, no lower rows
        assert_eq!(sub.num_linearization_rows(), 4);
        // d (2) + z + r_upper
        assert_eq!(sub.num_variables(), 4);
    }

    #[test]
    fn reduction_is_nonnegative_at_qp_solution() {
        let model = LinearModel {
            objective: FunctionModel::smooth(1.0, DVector::from_vec(vec![1.0, -2.0])),
            equalities: vec![FunctionModel {
                value: 0.4,
                gradients: vec![DVector::from_vec(vec![1.0, 1.0]), DVector::from_vec(vec![0.9, 1.2])],
            }],
            inequalities: vec![FunctionModel::smooth(2.0, DVector::from_vec(vec![0.0, 1.0]))],
            lower: vec![0.0],
            upper: vec![1.0],
        };
        let h = DMatrix::identity(2, 2) * 2.0;
        let sub = build_subproblem(&model, &h, 0.5);
        let sol = sub.solve(1e-10).unwrap();
        let dq = model_reduction(&model, &h, 0.5, &sol.d);
        assert!(dq >= -1e-8);
        // Δq equals merit minus the QP optimal value.
        let qp_obj = sub.qp.objective(&{
            let mut v = DVector::zeros(sub.num_variables());
            v.rows_mut(0, 2).copy_from(&sol.d);
            v[2] = sol.z;
            v[3] = sol.e[0];
            v[4] = sol.r_upper[0];
            v[5] = sol.r_lower[0];
            v
        });
        let m = merit(&model.values(), &model.lower, &model.upper, 0.5);
        assert!((m - qp_obj - dq).abs() < 1e-7);
    }
}
