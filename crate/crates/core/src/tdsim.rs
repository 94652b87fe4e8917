//! Time-domain simulation of the machine/exciter DAE with an implicit
//! trapezoidal rule and a constant-power load step.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::case::NetworkCase;
use crate::dae::{DaeModel, OperatingPoint};

/// Step change of the constant-power load at one bus (per unit).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    /// Bus id as written in the case file.
    pub bus: usize,
    pub delta_pl: f64,
    pub delta_ql: f64,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub horizon: f64,
    pub dt: f64,
    pub disturbance: Option<Disturbance>,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            horizon: 20.0,
            dt: 0.01,
            disturbance: None,
            newton_tol: 1e-10,
            newton_max_iter: 20,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.horizon >= self.dt) {
            return bad("horizon must be at least dt");
        }
        if !(self.newton_tol > 0.0) {
            return bad("newton_tol must be positive");
        }
        if self.newton_max_iter == 0 {
            return bad("newton_max_iter must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub time: Vec<f64>,
    pub points: Vec<OperatingPoint>,
    /// `omega[n][k]`: rotor speed of machine `k` at `time[n]` (rad/s).
    pub omega: Vec<Vec<f64>>,
    /// Inertia constants, kept for centre-of-inertia quantities.
    pub inertia: Vec<f64>,
    pub omega_s: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    /// Inertia-weighted mean speed at each stored time.
    pub fn center_of_inertia(&self) -> Vec<f64> {
        let total: f64 = self.inertia.iter().sum();
        self.omega
            .iter()
            .map(|w| w.iter().zip(&self.inertia).map(|(w, m)| w * m).sum::<f64>() / total)
            .collect()
    }

    /// Writes `t,omega_1,..,omega_g`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let g = self.inertia.len();
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=g).map(|k| format!("omega_{k}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (t, om) in self.time.iter().zip(&self.omega) {
            write!(w, "{t}")?;
            for v in om {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation settings: {0}")]
    InvalidConfig(String),
    #[error("unknown disturbance bus {0}")]
    UnknownBus(usize),
    #[error("initial point is not an equilibrium (residual {residual:.3e})")]
    NotEquilibrium { residual: f64 },
    #[error("step failed at t = {time}: {source}")]
    StepFailure {
        time: f64,
        source: StepError,
        partial: Box<Trajectory>,
    },
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum StepError {
    #[error("Newton iteration did not converge (residual {residual:.3e})")]
    Diverged { residual: f64 },
    #[error("singular iteration matrix")]
    Singular,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

fn newton<F>(z0: &[f64], tol: f64, max_iter: usize, mut eval: F) -> Result<Vec<f64>, StepError>
where
    F: FnMut(&[f64]) -> (Vec<f64>, DMatrix<f64>),
{
    let mut z = z0.to_vec();
    let (mut r, mut jac) = eval(&z);
    let mut res = max_abs(&r);
    for _ in 0..max_iter {
        if res <= tol {
            return Ok(z);
        }
        let dz = jac.lu().solve(&DVector::from_vec(r)).ok_or(StepError::Singular)?;
        for (zi, d) in z.iter_mut().zip(dz.iter()) {
            *zi -= d;
        }
        (r, jac) = eval(&z);
        res = max_abs(&r);
        if !res.is_finite() {
            return Err(StepError::Diverged { residual: res });
        }
    }
    if res <= tol {
        Ok(z)
    } else {
        Err(StepError::Diverged { residual: res })
    }
}

/// One implicit-trapezoidal step from `z` (whose algebraic rows must already
/// hold): `x⁺ − x − dt/2·(f(z⁺) + f(z)) = 0`, `g(z⁺) = 0`.
pub fn dae_step(
    model: &DaeModel,
    z: &[f64],
    tm: &[f64],
    vref: &[f64],
    dt: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>, StepError> {
    let ns = model.layout.num_states();
    let f0 = model.residual(z, tm, vref);
    newton(z, tol, max_iter, |zn| {
        let (mut r, mut j) = model.residual_and_jacobian(zn, tm, vref);
        for i in 0..ns {
            r[i] = zn[i] - z[i] - 0.5 * dt * (r[i] + f0[i]);
            for c in 0..j.ncols() {
                j[(i, c)] *= -0.5 * dt;
            }
            j[(i, i)] += 1.0;
        }
        (r, j)
    })
}

/// Re-solves the algebraic variables of `z` with the states frozen.
pub fn consistent_algebraic(
    model: &DaeModel,
    z: &[f64],
    tm: &[f64],
    vref: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>, StepError> {
    let ns = model.layout.num_states();
    newton(z, tol, max_iter, |zn| {
        let (mut r, mut j) = model.residual_and_jacobian(zn, tm, vref);
        for i in 0..ns {
            r[i] = 0.0;
            for c in 0..j.ncols() {
                j[(i, c)] = 0.0;
            }
            j[(i, i)] = 1.0;
        }
        (r, j)
    })
}

/// Integrates from the equilibrium `x0`, applying the configured load step.
pub fn simulate(case: &NetworkCase, x0: &OperatingPoint, config: &SimConfig) -> Result<Trajectory, SimError> {
    config.validate()?;
    let mut model = DaeModel::new(case);
    let dist_bus = match &config.disturbance {
        Some(d) => Some(case.bus_index(d.bus).ok_or(SimError::UnknownBus(d.bus))?),
        None => None,
    };
    let (tm, vref) = (x0.tm.clone(), x0.vref.clone());
    let mut z = model.pack(x0);
    let residual = max_abs(&model.residual(&z, &tm, &vref));
    if !(residual <= 1e-6) {
        return Err(SimError::NotEquilibrium { residual });
    }
    let steps = (config.horizon / config.dt).round() as usize;
    let mut traj = Trajectory {
        time: Vec::with_capacity(steps + 1),
        points: Vec::with_capacity(steps + 1),
        omega: Vec::with_capacity(steps + 1),
        inertia: case.generators.iter().map(|gen| gen.machine.m).collect(),
        omega_s: case.generators.first().map_or(0.0, |gen| gen.machine.omega_s),
    };
    let mut op = x0.clone();
    let mut applied = config.disturbance.is_none();

    for n in 0..=steps {
        let t = n as f64 * config.dt;
        if !applied {
            let d = config.disturbance.as_ref().expect("pending disturbance");
            if t >= d.time - 1e-12 {
                let b = dist_bus.expect("bus resolved");
                model.pl[b] += d.delta_pl;
                model.ql[b] += d.delta_ql;
                z = consistent_algebraic(&model, &z, &tm, &vref, config.newton_tol, config.newton_max_iter).map_err(
                    |source| SimError::StepFailure {
                        time: t,
                        source,
                        partial: Box::new(traj.clone()),
                    },
                )?;
                applied = true;
            }
        }
        model.unpack(&z, &mut op);
        traj.time.push(t);
        traj.omega.push(op.omega.clone());
        traj.points.push(op.clone());
        if n == steps {
            break;
        }
        z = dae_step(&model, &z, &tm, &vref, config.dt, config.newton_tol, config.newton_max_iter).map_err(|source| {
            SimError::StepFailure {
                time: t,
                source,
                partial: Box::new(traj.clone()),
            }
        })?;
    }
    Ok(traj)
}

/// Speed deviation reference for [`decay_rate_estimate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpeedReference {
    /// `ω_i − ω_s`.
    Synchronous,
    /// `ω_i − ω_COI`; removes the common frequency drift after a load step
    /// in systems without governors.
    #[default]
    CenterOfInertia,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DecayError {
    #[error("signal amplitude below 1e-12, nothing to fit")]
    NoSignal,
    #[error("fewer than two envelope peaks in the window")]
    TooFewPeaks,
}

/// Slope of the least-squares line through `ln |y|` at the local maxima of
/// `|y|` whose times lie in `window`.
pub fn envelope_decay_rate(t: &[f64], y: &[f64], window: (f64, f64)) -> Result<f64, DecayError> {
    let idx: Vec<usize> = (0..t.len()).filter(|&i| t[i] >= window.0 && t[i] <= window.1).collect();
    if idx.is_empty() || idx.iter().all(|&i| y[i].abs() < 1e-12) {
        return Err(DecayError::NoSignal);
    }
    let a: Vec<f64> = idx.iter().map(|&i| y[i].abs()).collect();
    let mut pts = Vec::new();
    for k in 1..a.len().saturating_sub(1) {
        if a[k] > a[k - 1] && a[k] >= a[k + 1] && a[k] > 1e-12 {
            // Parabolic refinement of the peak.
            let (l, c, r) = (a[k - 1], a[k], a[k + 1]);
            let den = l - 2.0 * c + r;
            let (off, peak) = if den < 0.0 {
                let off = 0.5 * (l - r) / den;
                (off, c - 0.25 * (l - r) * off)
            } else {
                (0.0, c)
            };
            let h = t[idx[k + 1]] - t[idx[k]];
            pts.push((t[idx[k]] + off * h, peak.ln()));
        }
    }
    if pts.len() < 2 {
        return Err(DecayError::TooFewPeaks);
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    if sxx == 0.0 {
        return Err(DecayError::TooFewPeaks);
    }
    Ok(sxy / sxx)
}

/// Decay rate (1/s) of `max_i |ω_i − ω_ref|` over `window`.
pub fn decay_rate_estimate(traj: &Trajectory, window: (f64, f64), reference: SpeedReference) -> Result<f64, DecayError> {
    let coi = traj.center_of_inertia();
    let y: Vec<f64> = traj
        .omega
        .iter()
        .enumerate()
        .map(|(n, w)| {
            let r = match reference {
                SpeedReference::Synchronous => traj.omega_s,
                SpeedReference::CenterOfInertia => coi[n],
            };
            w.iter().fold(0.0_f64, |m, wi| m.max((wi - r).abs()))
        })
        .collect();
    envelope_decay_rate(&traj.time, &y, window)
}

/// Largest speed deviation from `ω_s` over the trajectory.
pub fn max_speed_deviation(traj: &Trajectory) -> f64 {
    traj.omega
        .iter()
        .flat_map(|w| w.iter().map(|wi| (wi - traj.omega_s).abs()))
        .fold(0.0, f64::max)
}

/// Largest drift of any state from its initial value.
pub fn max_state_drift(traj: &Trajectory) -> f64 {
    let Some(first) = traj.points.first() else {
        return 0.0;
    };
    let mut m: f64 = 0.0;
    for p in &traj.points {
        for (a, b) in [
            (&p.delta, &first.delta),
            (&p.omega, &first.omega),
            (&p.eqp, &first.eqp),
            (&p.edp, &first.edp),
            (&p.efd, &first.efd),
            (&p.vr, &first.vr),
            (&p.rf, &first.rf),
        ] {
            for (x, y) in a.iter().zip(b.iter()) {
                m = m.max((x - y).abs());
            }
        }
    }
    m
}
