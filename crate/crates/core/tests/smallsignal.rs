mod common;

use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;
use sssc_core::dae::{state, steady_state_init, DaeModel, OperatingPoint};
use sssc_core::network::{solve_power_flow, Network};
use sssc_core::smallsignal::*;
use sssc_core::NetworkCase;

use common::{rel_err, two_bus, wscc9};

fn equilibrium(case: &NetworkCase, pg_mw: &[f64], v: &[f64]) -> OperatingPoint {
    let pg: Vec<f64> = pg_mw.iter().map(|p| p / case.base_mva).collect();
    let pf = solve_power_flow(case, &Network::new(case), &pg, v, 1e-12).unwrap();
    steady_state_init(case, &pf.pg, &pf.qg, &pf.v, &pf.theta).unwrap()
}

fn base_point() -> (DaeModel, Vec<f64>) {
    let case = wscc9();
    let op = equilibrium(&case, &[25.0, 25.0, 276.0], &[1.040, 1.045, 1.022]);
    let model = DaeModel::new(&case);
    let z = model.pack(&op);
    (model, z)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[test]
fn single_machine_closed_form_angle() {
    let case = two_bus(0.8, 0.3);
    let op = equilibrium(&case, &[80.0], &[1.02]);
    let m = &case.generators[0].machine;
    let (p, q, v) = (op.pg[0], op.qg[0], op.v[0]);
    let expected = op.theta[0] + (p * m.xq).atan2(v * v + q * m.xq);
    assert!((op.delta[0] - expected).abs() < 1e-10, "{} vs {expected}", op.delta[0]);
    assert!(op.edp[0].abs() < 1e-12);
    let model = DaeModel::new(&case);
    let r = model.residual(&model.pack(&op), &op.tm, &op.vref);
    assert!(max_abs(&r) < 1e-10, "{r:?}");
}

#[test]
fn initialized_point_is_an_equilibrium() {
    let case = wscc9();
    for (pg, v) in [([25.0, 25.0, 276.0], [1.040, 1.045, 1.022]), ([71.6, 163.0, 85.0], [1.04, 1.025, 1.025])] {
        let op = equilibrium(&case, &pg, &v);
        let model = DaeModel::new(&case);
        let r = model.residual(&model.pack(&op), &op.tm, &op.vref);
        assert!(max_abs(&r) < 1e-10);
        assert!(op.omega.iter().all(|&w| w == case.generators[0].machine.omega_s));
        for (k, gen) in case.generators.iter().enumerate() {
            let e = &gen.exciter;
            assert!((op.vr[k] - (e.ke + e.saturation(op.efd[k])) * op.efd[k]).abs() < 1e-12);
            assert!((op.rf[k] - e.kf / e.tf * op.efd[k]).abs() < 1e-12);
            assert!((op.vref[k] - (op.v[gen.bus - 1] + op.vr[k] / e.ka)).abs() < 1e-12);
        }
    }
}

#[test]
fn base_dispatch_spectral_abscissa() {
    let (model, z) = base_point();
    let (sm, modal) = analyze_point(&model, &z, &ModalOptions::default()).unwrap();
    assert_eq!(sm.a.shape(), (21, 21));
    assert!((modal.eta + 0.04).abs() <= 0.02, "eta = {}", modal.eta);
    // Uniform angle shift and, with D = 0, uniform speed shift.
    assert_eq!(modal.zero_filtered.len(), 2, "{:?}", modal.zero_filtered);
    assert!(modal.zero_filtered.iter().all(|l| l.norm() <= 1e-6));
    assert!(sm.condition_estimate < MAX_CONDITION);
}

#[test]
fn jacobian_matches_finite_differences() {
    let (model, z) = base_point();
    let tm = vec![0.5; 3];
    let vref = vec![1.05; 3];
    let (_, j) = model.residual_and_jacobian(&z, &tm, &vref);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for c in 0..z.len() {
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[c] += h;
        zm[c] -= h;
        let fp = model.residual(&zp, &tm, &vref);
        let fm = model.residual(&zm, &tm, &vref);
        for r in 0..z.len() {
            let fd = (fp[r] - fm[r]) / (2.0 * h);
            worst = worst.max((fd - j[(r, c)]).abs() / j[(r, c)].abs().max(1.0));
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst:.3e}");
}

#[test]
fn rotor_angle_row_and_zero_damping() {
    let (model, z) = base_point();
    let blocks = linearize_blocks(&model, &z);
    let l = &model.layout;
    for k in 0..3 {
        let row = l.state(k, state::DELTA);
        for c in 0..l.num_states() {
            let expected = if c == l.state(k, state::OMEGA) { 1.0 } else { 0.0 };
            assert_eq!(blocks.a[(row, c)], expected);
        }
        assert!(blocks.b.row(row).iter().all(|&v| v == 0.0));
        let w = l.state(k, state::OMEGA);
        assert_eq!(blocks.a[(w, w)], 0.0);
    }
    let g = 3;
    assert_eq!(blocks.d1().shape(), (2 * g, 2 * g));
    assert_eq!(blocks.d7().shape(), (18 - 2 * g, 18 - 2 * g));
    assert_eq!(blocks.b1().ncols() + blocks.b2().ncols(), 4 * g);
}

fn random_blocks(seed: u64) -> LinearizedBlocks {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let g = 2;
    let (ns, na) = (7 * g, 2 * g + 2 * 3);
    let mut m = |r, c| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let mut d = m(na, na);
    for i in 0..na {
        d[(i, i)] += 5.0;
    }
    LinearizedBlocks {
        num_generators: g,
        a: m(ns, ns),
        b: m(ns, na),
        c: m(na, ns),
        d,
        e1: DMatrix::zeros(ns, 2 * g),
    }
}

#[test]
fn reduction_without_coupling_is_exact() {
    let mut blocks = random_blocks(1);
    blocks.b.fill(0.0);
    let a = blocks.a.clone();
    assert_eq!(reduce_state_matrix(blocks).unwrap().a, a);
}

#[test]
fn reduction_matches_explicit_inverse() {
    for seed in 0..5 {
        let blocks = random_blocks(seed);
        let oracle = &blocks.a - &blocks.b * blocks.d.clone().try_inverse().unwrap() * &blocks.c;
        let a = reduce_state_matrix(blocks).unwrap().a;
        assert!((a - oracle).amax() < 1e-10);
    }
}

#[test]
fn singular_network_is_reported() {
    let mut blocks = random_blocks(3);
    blocks.d.fill(0.0);
    assert!(matches!(reduce_state_matrix(blocks), Err(SmallSignalError::Singular)));
    let mut blocks = random_blocks(4);
    let r0 = blocks.d.row(0).into_owned();
    blocks.d.row_mut(1).copy_from(&(r0 * (1.0 + 1e-15)));
    assert!(reduce_state_matrix(blocks).is_err());
}

#[test]
fn diagonal_spectrum() {
    let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]);
    let m = modal_analysis(&a, &ModalOptions::default()).unwrap();
    assert_eq!(m.eta, -1.0);
    assert_eq!(m.lambda, Complex64::new(-1.0, 0.0));
}

#[test]
fn rotation_tie_prefers_positive_imaginary_part() {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    let m = modal_analysis(&a, &ModalOptions::default()).unwrap();
    assert!(m.eta.abs() < 1e-15);
    assert!((m.lambda - Complex64::new(0.0, 1.0)).norm() < 1e-12, "{}", m.lambda);
}

#[test]
fn zero_modes_are_filtered() {
    let a = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, -0.5, 0.0, 0.0, 0.0, -3.0]);
    let m = modal_analysis(&a, &ModalOptions::default()).unwrap();
    assert_eq!(m.eta, -0.5);
    assert_eq!(m.zero_filtered.len(), 1);
    let opts = ModalOptions {
        zero_mode_tol: -1.0,
        ..ModalOptions::default()
    };
    assert_eq!(modal_analysis(&a, &opts).unwrap().eta, 0.0);
}

#[test]
fn critical_eigentriple_residuals() {
    let (model, z) = base_point();
    let (sm, m) = analyze_point(&model, &z, &ModalOptions::default()).unwrap();
    let ac = sm.a.map(|v| Complex64::new(v, 0.0));
    let tol = 1e-8 * sm.a.norm();
    assert!((&ac * &m.phi - m.phi.map(|v| v * m.lambda)).norm() <= tol);
    assert!((ac.transpose() * &m.psi - m.psi.map(|v| v * m.lambda)).norm() <= tol * m.psi.norm());
    let prod: Complex64 = m.psi.iter().zip(m.phi.iter()).map(|(a, b)| a * b).sum();
    assert!((prod - 1.0).norm() < 1e-10);
    let report = ModalReport::from(&m);
    let back: ModalReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(back, report);
}

fn eta_of(t: f64, f: impl Fn(f64) -> f64) -> f64 {
    let a = DMatrix::from_row_slice(2, 2, &[f(t), 1.0, 1.0, -2.0]);
    modal_analysis(&a, &ModalOptions::default()).unwrap().eta
}

#[test]
fn symmetric_pencil_derivative() {
    // λ_max(t) = ((t − 2) + √((t + 2)² + 4)) / 2
    for t in [-1.0, 0.0, 0.7, 2.0] {
        let a = DMatrix::from_row_slice(2, 2, &[t, 1.0, 1.0, -2.0]);
        let m = modal_analysis(&a, &ModalOptions::default()).unwrap();
        let da = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let d = eigenvalue_derivative(&m, &da).re;
        let s: f64 = (t + 2.0) * (t + 2.0) + 4.0;
        let exact = 0.5 * (1.0 + (t + 2.0) / s.sqrt());
        assert!((d - exact).abs() < 1e-12, "t = {t}: {d} vs {exact}");
    }
}

#[test]
fn quadratic_pencil_finite_difference() {
    let f = |t: f64| t * t;
    for t in [-0.5, 0.3, 1.1] {
        let h = 1e-6;
        let fd = (eta_of(t + h, f) - eta_of(t - h, f)) / (2.0 * h);
        let u = t * t;
        let s: f64 = (u + 2.0) * (u + 2.0) + 4.0;
        let exact = 0.5 * (1.0 + (u + 2.0) / s.sqrt()) * 2.0 * t;
        assert!((fd - exact).abs() < 1e-6, "t = {t}: {fd} vs {exact}");
    }
}

#[test]
fn closed_form_gradient_matches_finite_differences() {
    let (model, z) = base_point();
    let opts = ModalOptions::default();
    let (sm, m) = analyze_point(&model, &z, &opts).unwrap();
    assert!(m.margin > 1e-3);
    let g = spectral_abscissa_gradient(&model, &z, &sm, &m);
    let idx: Vec<usize> = (0..z.len()).collect();
    let fd = finite_difference_gradient(&model, &z, &idx, 1e-6, &opts).unwrap();
    // η itself carries rounding noise of order eps·‖A‖, so the comparison is
    // normwise, with an entrywise check on the components that matter.
    let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let worst = g.iter().zip(&fd).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    assert!(worst / scale <= 1e-4, "normwise error {:.3e}", worst / scale);
    for i in (0..z.len()).filter(|&i| g[i].abs() >= 1e-2 * scale) {
        assert!(rel_err(g[i], fd[i]) <= 1e-4, "coordinate {i}: {} vs {}", g[i], fd[i]);
    }
    // With D = 0 the Jacobian does not depend on the rotor speeds.
    for k in 0..3 {
        let w = model.layout.state(k, state::OMEGA);
        assert_eq!(g[w], 0.0);
        assert!(fd[w].abs() < 1e-8);
    }
}

#[test]
fn finite_difference_error_shrinks_with_step() {
    let (model, z) = base_point();
    let opts = ModalOptions::default();
    let (sm, m) = analyze_point(&model, &z, &opts).unwrap();
    let g = spectral_abscissa_gradient(&model, &z, &sm, &m);
    let i = model.layout.v(2);
    let err = |h| (finite_difference_gradient(&model, &z, &[i], h, &opts).unwrap()[0] - g[i]).abs();
    let (e1, e2) = (err(1e-2), err(1e-3));
    assert!(e2 < e1 / 10.0, "{e1:.3e} -> {e2:.3e}");
}

#[test]
fn directional_derivative_converges() {
    let (model, z) = base_point();
    let opts = ModalOptions::default();
    let (sm, m) = analyze_point(&model, &z, &opts).unwrap();
    let g = spectral_abscissa_gradient(&model, &z, &sm, &m);
    let d: Vec<f64> = (0..z.len()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
    let slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
    let eta = |h: f64| {
        let zh: Vec<f64> = z.iter().zip(&d).map(|(a, b)| a + h * b).collect();
        analyze_point(&model, &zh, &opts).unwrap().1.eta
    };
    let errs: Vec<f64> = [1e-3, 1e-4, 1e-5].iter().map(|&h| ((eta(h) - m.eta) / h - slope).abs()).collect();
    assert!(errs[1] < errs[0] && errs[2] < errs[1], "{errs:?}");
    assert!(rel_err((eta(1e-6) - eta(-1e-6)) / 2e-6, slope) < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn derivative_is_scale_invariant(re in -3.0f64..3.0, im in -3.0f64..3.0, re2 in 0.1f64..3.0, im2 in -3.0f64..3.0) {
        prop_assume!(re.hypot(im) > 1e-3);
        let a = DMatrix::from_row_slice(3, 3, &[-0.2, 2.0, 0.1, -2.0, -0.3, 0.5, 0.0, 0.4, -1.0]);
        let da = DMatrix::from_row_slice(3, 3, &[0.3, -0.1, 0.0, 0.2, 0.5, -0.7, 0.1, 0.0, 0.9]);
        let mut m = modal_analysis(&a, &ModalOptions::default()).unwrap();
        let d0 = eigenvalue_derivative(&m, &da);
        m.psi = m.psi.map(|v| v * Complex64::new(re, im));
        m.phi = m.phi.map(|v| v * Complex64::new(re2, im2));
        let d1 = eigenvalue_derivative(&m, &da);
        prop_assert!((d0 - d1).norm() < 1e-10 * (1.0 + d0.norm()));
    }

    #[test]
    fn spectra_are_conjugate_closed(vals in proptest::collection::vec(-2.0f64..2.0, 16)) {
        let a = DMatrix::from_row_slice(4, 4, &vals);
        let m = modal_analysis(&a, &ModalOptions::default()).unwrap();
        for l in &m.eigenvalues {
            prop_assert!(m.eigenvalues.iter().any(|c| (c - l.conj()).norm() < 1e-8 * (1.0 + l.norm())));
        }
        let max_re = m.eigenvalues.iter().filter(|l| l.norm() > 1e-6).map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(m.eta, max_re);
        prop_assert!(m.lambda.im >= 0.0 || m.eigenvalues.iter().all(|c| (c.re - m.eta).abs() > 1e-12 || c.im <= m.lambda.im));
    }
}
