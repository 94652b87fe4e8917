use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqpgs::qp::{solve_qp, QpProblem};

fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let q = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
    let c = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let g = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    // h > 0 keeps the origin strictly feasible.
    let h = DVector::from_fn(m, |_, _| rng.random_range(0.1..1.0));
    QpProblem { q, c, g, h }
}

/// Exhaustive search over active sets: solve the equality-constrained KKT
/// system for every subset and keep the best primal and dual feasible point.
fn enumerate_active_sets(qp: &QpProblem) -> f64 {
    let n = qp.q.nrows();
    let m = qp.g.nrows();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = active.len();
        if k > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.q);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&qp.c));
        for (r, &i) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = qp.g[(i, j)];
                kkt[(j, n + r)] = qp.g[(i, j)];
            }
            rhs[n + r] = qp.h[i];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let lam_ok = (0..k).all(|r| sol[n + r] >= -1e-10);
        let primal_ok = (&qp.g * &x - &qp.h).iter().all(|v| *v <= 1e-10);
        if lam_ok && primal_ok {
            best = best.min(qp.objective(&x));
        }
    }
    best
}

/// Lagrangian dual value `min_x ½xᵀQx + cᵀx + λᵀ(Gx − h)`.
fn dual_value(qp: &QpProblem, lambda: &DVector<f64>) -> f64 {
    let lam = lambda.map(|v| v.max(0.0));
    let w = &qp.c + qp.g.transpose() * &lam;
    let x = qp.q.clone().cholesky().unwrap().solve(&(-&w));
    0.5 * x.dot(&(&qp.q * &x)) + w.dot(&x) - lam.dot(&qp.h)
}

#[test]
fn matches_active_set_enumeration_on_small_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..40 {
        let n = 2 + trial % 4;
        let m = 3 + trial % 8;
        let qp = random_qp(&mut rng, n, m);
        let res = solve_qp(&qp, 1e-8).unwrap();
        let oracle = enumerate_active_sets(&qp);
        assert!(
            (res.objective - oracle).abs() <= 1e-7,
            "trial {trial}: ipm {} vs enumeration {oracle}",
            res.objective
        );
    }
}

#[test]
fn duality_gap_closes_on_larger_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let n = 10 + trial % 11;
        let m = 30 + 3 * (trial % 11);
        let qp = random_qp(&mut rng, n, m);
        let res = solve_qp(&qp, 1e-8).unwrap();
        assert!(res.kkt.max() <= 1e-8);
        let primal_violation = (&qp.g * &res.x - &qp.h).max().max(0.0);
        assert!(primal_violation <= 1e-8);
        let gap = res.objective - dual_value(&qp, &res.lambda);
        assert!(gap.abs() <= 1e-7, "trial {trial}: gap {gap}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kkt_residual_within_tolerance(seed in any::<u64>(), n in 1usize..8, m in 0usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qp = random_qp(&mut rng, n, m);
        let res = solve_qp(&qp, 1e-8).unwrap();
        prop_assert!(res.kkt.max() <= 1e-8);
        prop_assert!(res.lambda.iter().all(|&l| l >= -1e-12));
    }
}
