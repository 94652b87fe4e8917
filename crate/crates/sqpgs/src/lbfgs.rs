//! Limited-memory BFGS approximation of the Lagrangian Hessian.
//!
//! The approximation is materialized as a dense matrix because the QP
//! subproblem consumes it densely. Pairs are Powell-damped on insertion so
//! every stored pair has positive curvature.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Powell damping threshold: stored pairs satisfy `sᵀỹ ≥ 0.2·sᵀBs`.
pub const DAMPING_THRESHOLD: f64 = 0.2;

/// Outcome of a call to [`LbfgsHessian::update`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateOutcome {
    /// `‖s‖ = 0` (null step); nothing stored.
    Skipped,
    /// The raw pair had enough curvature.
    Applied,
    /// The pair was damped with the given `θ ∈ (0, 1)`.
    Damped(f64),
}

#[derive(Debug, Clone)]
pub struct LbfgsHessian {
    n: usize,
    memory: usize,
    h_min: f64,
    h_max: f64,
    pairs: VecDeque<(DVector<f64>, DVector<f64>)>,
    dense: DMatrix<f64>,
}

impl LbfgsHessian {
    pub fn new(n: usize, memory: usize, h_min: f64) -> Self {
        Self::with_bounds(n, memory, h_min, f64::INFINITY)
    }

    /// Approximation whose eigenvalues are kept in `[h_min, h_max]`.
    pub fn with_bounds(n: usize, memory: usize, h_min: f64, h_max: f64) -> Self {
        Self {
            n,
            memory,
            h_min,
            h_max,
            pairs: VecDeque::with_capacity(memory),
            dense: DMatrix::identity(n, n),
        }
    }

    /// Current approximation `H` (symmetric, spectrum inside `[h_min, h_max]`).
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.dense
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Drops all curvature pairs, leaving `H = I`.
    pub fn reset(&mut self) {
        self.pairs.clear();
        self.dense = DMatrix::identity(self.n, self.n);
    }

    /// Adds the pair `(s, y)` after Powell damping.
    pub fn update(&mut self, s: &DVector<f64>, y: &DVector<f64>) -> UpdateOutcome {
        assert_eq!(s.len(), self.n);
        assert_eq!(y.len(), self.n);
        if s.norm() == 0.0 || !s.iter().chain(y.iter()).all(|v| v.is_finite()) {
            return UpdateOutcome::Skipped;
        }
        let bs = &self.dense * s;
        let sbs = s.dot(&bs);
        let sy = s.dot(y);
        let (y_used, outcome) = if sy >= DAMPING_THRESHOLD * sbs {
            (y.clone(), UpdateOutcome::Applied)
        } else {
            let theta = (1.0 - DAMPING_THRESHOLD) * sbs / (sbs - sy);
            (theta * y + (1.0 - theta) * &bs, UpdateOutcome::Damped(theta))
        };
        if self.pairs.len() == self.memory {
            self.pairs.pop_front();
        }
        if self.memory > 0 {
            self.pairs.push_back((s.clone(), y_used));
        }
        self.rebuild();
        outcome
    }

    fn rebuild(&mut self) {
        // Initial matrix γI with γ = yᵀy / sᵀy of the newest pair.
        let gamma = self
            .pairs
            .back()
            .map(|(s, y)| y.dot(y) / s.dot(y))
            .filter(|g| g.is_finite() && *g > 0.0)
            .unwrap_or(1.0)
            .clamp(1e-4, 1e8);
        let mut b = DMatrix::identity(self.n, self.n) * gamma;
        for (s, y) in &self.pairs {
            let bs = &b * s;
            let sbs = s.dot(&bs);
            let sy = s.dot(y);
            if sbs <= 0.0 || sy <= 0.0 {
                continue;
            }
            b -= (&bs * bs.transpose()) / sbs;
            b += (y * y.transpose()) / sy;
        }
        let bt = b.transpose();
        b = (b + bt) * 0.5;
        self.dense = enforce_bounds(b, self.h_min, self.h_max);
    }
}

fn enforce_bounds(b: DMatrix<f64>, h_min: f64, h_max: f64) -> DMatrix<f64> {
    let n = b.nrows();
    let mut lower = b.clone();
    let mut upper = -b.clone();
    for i in 0..n {
        lower[(i, i)] -= h_min;
        upper[(i, i)] += h_max;
    }
    if lower.cholesky().is_some() && (h_max.is_infinite() || upper.cholesky().is_some()) {
        return b;
    }
    let eig = SymmetricEigen::new(b);
    let vals = eig.eigenvalues.map(|v| v.clamp(h_min, h_max));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn secant_property_on_quadratic() {
        let q = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let mut h = LbfgsHessian::new(2, 10, 1e-8);
        for s in [
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.3, -0.7]),
            DVector::from_vec(vec![-0.2, 0.5]),
        ] {
            let y = &q * &s;
            assert_eq!(h.update(&s, &y), UpdateOutcome::Applied);
            let hs = h.matrix() * &s;
            assert!((hs - &y).amax() < 1e-12);
        }
    }

    #[test]
    fn identity_pair_keeps_positive_definite() {
        let mut h = LbfgsHessian::new(3, 5, 1e-8);
        let s = DVector::from_vec(vec![0.1, -2.0, 0.4]);
        h.update(&s, &s);
        let eig = SymmetricEigen::new(h.matrix().clone());
        assert!(eig.eigenvalues.min() > 0.0);
    }

    #[test]
    fn negative_curvature_is_damped() {
        let mut h = LbfgsHessian::new(2, 5, 1e-8);
        let s = DVector::from_vec(vec![1.0, 1.0]);
        let y = DVector::from_vec(vec![-1.0, 0.5]);
        let sbs = s.dot(&(h.matrix() * &s));
        match h.update(&s, &y) {
            UpdateOutcome::Damped(theta) => assert!(theta > 0.0 && theta < 1.0),
            other => panic!("expected damping, got {other:?}"),
        }
        let (s_st, y_st) = h.pairs.back().unwrap();
        assert!(s_st.dot(y_st) >= DAMPING_THRESHOLD * sbs - 1e-12);
        let eig = SymmetricEigen::new(h.matrix().clone());
        assert!(eig.eigenvalues.min() >= 1e-8);
    }

    #[test]
    fn spectrum_is_capped() {
        let mut h = LbfgsHessian::with_bounds(2, 5, 1e-8, 10.0);
        let s = DVector::from_vec(vec![1e-3, 0.0]);
        let y = DVector::from_vec(vec![5.0, 0.0]);
        h.update(&s, &y);
        let eig = SymmetricEigen::new(h.matrix().clone());
        assert!(eig.eigenvalues.max() <= 10.0 + 1e-9);
        assert!(eig.eigenvalues.min() >= 1e-8);
    }

    #[test]
    fn zero_step_is_skipped() {
        let mut h = LbfgsHessian::new(2, 5, 1e-8);
        let out = h.update(&DVector::zeros(2), &DVector::from_vec(vec![1.0, 2.0]));
        assert_eq!(out, UpdateOutcome::Skipped);
        assert_eq!(h.num_pairs(), 0);
    }

    #[test]
    fn memory_is_bounded() {
        let mut h = LbfgsHessian::new(2, 2, 1e-8);
        for i in 0..5 {
            let s = DVector::from_vec(vec![1.0, i as f64]);
            h.update(&s, &(2.0 * &s));
        }
        assert_eq!(h.num_pairs(), 2);
    }
}
