mod common;

use nalgebra::DVector;
use sssc_core::dae::{steady_state_init, DaeModel, OperatingPoint};
use sssc_core::network::{solve_power_flow, Network};
use sssc_core::smallsignal::{linearize_blocks, modal_analysis, reduce_state_matrix, ModalOptions};
use sssc_core::tdsim::*;
use sssc_core::NetworkCase;

use common::{two_bus, wscc9};

fn equilibrium(case: &NetworkCase, pg_mw: &[f64], v: &[f64]) -> OperatingPoint {
    let pg: Vec<f64> = pg_mw.iter().map(|p| p / case.base_mva).collect();
    let pf = solve_power_flow(case, &Network::new(case), &pg, v, 1e-12).unwrap();
    steady_state_init(case, &pf.pg, &pf.qg, &pf.v, &pf.theta).unwrap()
}

fn base() -> (NetworkCase, OperatingPoint) {
    let case = wscc9();
    let op = equilibrium(&case, &[25.0, 25.0, 276.0], &[1.040, 1.045, 1.022]);
    (case, op)
}

/// High-gain, fast exciters without rate feedback; unstable at this dispatch.
fn unstable() -> (NetworkCase, OperatingPoint) {
    let mut case = wscc9();
    for gen in &mut case.generators {
        gen.exciter.ka = 400.0;
        gen.exciter.kf = 0.0;
        gen.exciter.ta = 0.02;
    }
    let op = equilibrium(&case, &[71.6, 163.0, 85.0], &[1.04, 1.025, 1.025]);
    (case, op)
}

fn eta(case: &NetworkCase, op: &OperatingPoint) -> f64 {
    let model = DaeModel::new(case);
    let sm = reduce_state_matrix(linearize_blocks(&model, &model.pack(op))).unwrap();
    modal_analysis(&sm.a, &ModalOptions::default()).unwrap().eta
}

fn step(bus: usize, mw: f64, time: f64) -> Option<Disturbance> {
    Some(Disturbance {
        bus,
        delta_pl: mw / 100.0,
        delta_ql: 0.0,
        time,
    })
}

fn states(model: &DaeModel, op: &OperatingPoint) -> Vec<f64> {
    model.pack(op)[..model.layout.num_states()].to_vec()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn equilibrium_is_held() {
    let (case, op) = base();
    let cfg = SimConfig { horizon: 10.0, ..SimConfig::default() };
    let traj = simulate(&case, &op, &cfg).unwrap();
    assert_eq!(traj.len(), 1001);
    assert!(max_state_drift(&traj) < 1e-7, "{}", max_state_drift(&traj));
    assert!(max_speed_deviation(&traj) < 1e-7);
    assert_eq!(decay_rate_estimate(&traj, (0.0, 10.0), SpeedReference::Synchronous), Err(DecayError::NoSignal));
}

#[test]
fn step_from_equilibrium_is_fixed_point() {
    let (case, op) = base();
    let model = DaeModel::new(&case);
    let z = model.pack(&op);
    for dt in [0.001, 0.01, 0.1] {
        let next = dae_step(&model, &z, &op.tm, &op.vref, dt, 1e-12, 20).unwrap();
        assert!(diff_norm(&next, &z) < 1e-9);
    }
}

#[test]
fn single_step_matches_matrix_exponential() {
    let case = two_bus(0.8, 0.3);
    let op = equilibrium(&case, &[80.0], &[1.02]);
    let model = DaeModel::new(&case);
    let z0 = model.pack(&op);
    let ns = model.layout.num_states();
    let a = reduce_state_matrix(linearize_blocks(&model, &z0)).unwrap().a;
    let dir = [1.0, 0.3, -0.5, 0.2, 0.7, -0.4, 0.1];
    let amp = 1e-5;
    let mut z = z0.clone();
    for i in 0..ns {
        z[i] += amp * dir[i];
    }
    let z = consistent_algebraic(&model, &z, &op.tm, &op.vref, 1e-14, 20).unwrap();
    let dx = DVector::from_iterator(ns, (0..ns).map(|i| z[i] - z0[i]));
    let local_error = |dt: f64| {
        let next = dae_step(&model, &z, &op.tm, &op.vref, dt, 1e-13, 20).unwrap();
        let exact = (&a * dt).exp() * &dx;
        (0..ns).fold(0.0f64, |m, i| m.max((next[i] - z0[i] - exact[i]).abs()))
    };
    let (e1, e2) = (local_error(2e-3), local_error(1e-3));
    let ratio = e1 / e2;
    assert!((6.0..=10.0).contains(&ratio), "{e1:e} / {e2:e} = {ratio}");
}

#[test]
fn halving_the_step_quarters_the_error() {
    let (case, op) = base();
    let model = DaeModel::new(&case);
    let end = |dt: f64| {
        let cfg = SimConfig {
            horizon: 1.0,
            dt,
            disturbance: step(5, 20.0, 0.0),
            newton_tol: 1e-12,
            ..SimConfig::default()
        };
        let traj = simulate(&case, &op, &cfg).unwrap();
        states(&model, traj.points.last().unwrap())
    };
    let (x1, x2, x3) = (end(0.01), end(0.005), end(0.0025));
    let ratio = diff_norm(&x1, &x2) / diff_norm(&x2, &x3);
    assert!((3.5..=4.5).contains(&ratio), "{ratio}");
}

#[test]
fn synthetic_envelopes() {
    let t: Vec<f64> = (0..=3000).map(|n| n as f64 * 0.01).collect();
    let damped: Vec<f64> = t.iter().map(|&t| (-0.3 * t).exp() * (5.0 * t).cos()).collect();
    let rate = envelope_decay_rate(&t, &damped, (0.0, 20.0)).unwrap();
    assert!((rate - -0.3).abs() <= 0.02, "{rate}");
    let steady: Vec<f64> = t.iter().map(|&t| 0.01 * (3.0 * t + 0.4).sin()).collect();
    let rate = envelope_decay_rate(&t, &steady, (0.0, 30.0)).unwrap();
    assert!(rate.abs() <= 0.02, "{rate}");
    let growing: Vec<f64> = t.iter().map(|&t| 1e-6 * (0.2 * t).exp() * (8.0 * t).sin()).collect();
    let rate = envelope_decay_rate(&t, &growing, (1.0, 30.0)).unwrap();
    assert!((rate - 0.2).abs() <= 0.02, "{rate}");
}

#[test]
fn envelope_errors() {
    let t: Vec<f64> = (0..100).map(|n| n as f64 * 0.1).collect();
    assert_eq!(envelope_decay_rate(&t, &vec![0.0; 100], (0.0, 10.0)), Err(DecayError::NoSignal));
    assert_eq!(envelope_decay_rate(&t, &vec![1.0; 100], (20.0, 30.0)), Err(DecayError::NoSignal));
    let ramp: Vec<f64> = t.iter().map(|&t| 1.0 + t).collect();
    assert_eq!(envelope_decay_rate(&t, &ramp, (0.0, 10.0)), Err(DecayError::TooFewPeaks));
}

#[test]
fn configuration_errors() {
    let (case, op) = base();
    let bad = [
        SimConfig { dt: 0.0, ..SimConfig::default() },
        SimConfig { dt: f64::NAN, ..SimConfig::default() },
        SimConfig { horizon: 0.001, ..SimConfig::default() },
        SimConfig { newton_tol: 0.0, ..SimConfig::default() },
        SimConfig { newton_max_iter: 0, ..SimConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(simulate(&case, &op, &cfg), Err(SimError::InvalidConfig(_))));
    }
    let cfg = SimConfig { disturbance: step(42, 5.0, 1.0), ..SimConfig::default() };
    assert!(matches!(simulate(&case, &op, &cfg), Err(SimError::UnknownBus(42))));
    let mut off = op.clone();
    off.eqp[0] += 1e-3;
    assert!(matches!(
        simulate(&case, &off, &SimConfig::default()),
        Err(SimError::NotEquilibrium { .. })
    ));
}

#[test]
fn newton_failure_keeps_partial_trajectory() {
    let (case, op) = base();
    let cfg = SimConfig {
        horizon: 2.0,
        disturbance: step(5, 50.0, 0.5),
        newton_tol: 1e-14,
        newton_max_iter: 1,
        ..SimConfig::default()
    };
    match simulate(&case, &op, &cfg) {
        Err(SimError::StepFailure { time, partial, .. }) => {
            assert!((time - 0.5).abs() < 1e-9, "{time}");
            assert_eq!(partial.len(), 50);
        }
        other => panic!("expected a step failure, got {:?}", other.map(|t| t.len())),
    }
}

#[test]
fn csv_export() {
    let (case, op) = base();
    let cfg = SimConfig { horizon: 0.05, ..SimConfig::default() };
    let traj = simulate(&case, &op, &cfg).unwrap();
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,omega_1,omega_2,omega_3"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    let last: Vec<f64> = rows[5].split(',').map(|s| s.parse().unwrap()).collect();
    assert!((last[0] - 0.05).abs() < 1e-12);
    assert!((last[1] - traj.omega_s).abs() < 1e-9);
}

#[test]
fn small_disturbances_scale_linearly() {
    let (case, op) = base();
    let deviation = |mw: f64| {
        let cfg = SimConfig {
            horizon: 5.0,
            disturbance: step(5, mw, 0.5),
            ..SimConfig::default()
        };
        let traj = simulate(&case, &op, &cfg).unwrap();
        traj.omega.iter().flat_map(|w| w.iter().map(|wi| wi - traj.omega_s)).collect::<Vec<f64>>()
    };
    let nonlinearity = |alpha: f64| {
        let (full, half) = (deviation(alpha), deviation(alpha / 2.0));
        let scale = full.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let miss = full.iter().zip(&half).fold(0.0f64, |m, (a, b)| m.max((a - 2.0 * b).abs()));
        miss / scale
    };
    let (r1, r2) = (nonlinearity(4.0), nonlinearity(2.0));
    assert!(r1 < 0.05, "{r1}");
    let ratio = r1 / r2;
    assert!((1.6..=2.4).contains(&ratio), "{r1:e} / {r2:e}");
}

#[test]
fn decay_sign_follows_spectral_abscissa() {
    let (case, op) = base();
    let eta_stable = eta(&case, &op);
    assert!(eta_stable < 0.0);
    let cfg = SimConfig { horizon: 30.0, disturbance: step(5, 5.0, 1.0), ..SimConfig::default() };
    let traj = simulate(&case, &op, &cfg).unwrap();
    let rate = decay_rate_estimate(&traj, (2.0, 30.0), SpeedReference::default()).unwrap();
    assert!(rate < 0.0, "{rate}");

    let (case, op) = unstable();
    let eta_unstable = eta(&case, &op);
    assert!(eta_unstable > 0.0, "{eta_unstable}");
    let cfg = SimConfig { horizon: 20.0, disturbance: step(5, 0.1, 1.0), ..SimConfig::default() };
    let traj = simulate(&case, &op, &cfg).unwrap();
    let rate = decay_rate_estimate(&traj, (2.0, 20.0), SpeedReference::default()).unwrap();
    assert!(rate > 0.0);
    assert!((rate - eta_unstable).abs() <= 0.3 * eta_unstable.abs(), "{rate} vs {eta_unstable}");
}
