//! Differential-algebraic model of the machines, exciters and network.
//!
//! Per generator the states are `[δ, ω, E'q, E'd, E_fd, V_R, R_F]`; the
//! algebraic vector is `[I_d, I_q]` per generator followed by `[θ, V]` per bus
//! (generator buses in generator order, then load buses).
//!
//! ```text
//! dδ/dt    = ω − ω_s
//! dω/dt    = (T_M − (E'q − X'd I_d) I_q − (E'd + X'q I_q) I_d − D(ω − ω_s)) / M
//! dE'q/dt  = (−E'q − (X_d − X'd) I_d + E_fd) / T'd0
//! dE'd/dt  = (−E'd + (X_q − X'q) I_q) / T'q0
//! dE_fd/dt = (−(K_E + S_E(E_fd)) E_fd + V_R) / T_E
//! dV_R/dt  = (−V_R + K_A R_F − K_A K_F/T_F E_fd + K_A (V_ref − V)) / T_A
//! dR_F/dt  = (−R_F + K_F/T_F E_fd) / T_F
//! 0 = E'd − V sin(δ − θ) − R_s I_d + X'q I_q
//! 0 = E'q − V cos(δ − θ) − R_s I_q − X'd I_d
//! 0 = I_d V sin(δ − θ) + I_q V cos(δ − θ) − P_L − P(V, θ)      generator bus
//! 0 = I_d V cos(δ − θ) − I_q V sin(δ − θ) − Q_L − Q(V, θ)      generator bus
//! 0 = −P_L − P(V, θ),   0 = −Q_L − Q(V, θ)                      load bus
//! ```

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::case::{ExciterParams, MachineDynamics, NetworkCase};
use crate::network::{p_factor, q_factor, Network};

pub const STATES_PER_MACHINE: usize = 7;

/// Index arithmetic for the DAE vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DaeLayout {
    pub num_generators: usize,
    pub num_buses: usize,
    /// Position of each bus in the algebraic bus ordering.
    pub bus_slot: Vec<usize>,
}

impl DaeLayout {
    pub fn new(case: &NetworkCase) -> Self {
        let g = case.num_generators();
        let nb = case.num_buses();
        let mut bus_slot = vec![usize::MAX; nb];
        let mut next = 0;
        for b in case.generator_buses() {
            bus_slot[b] = next;
            next += 1;
        }
        for (b, slot) in bus_slot.iter_mut().enumerate() {
            if *slot == usize::MAX {
                let _ = b;
                *slot = next;
                next += 1;
            }
        }
        Self {
            num_generators: g,
            num_buses: nb,
            bus_slot,
        }
    }

    pub fn num_states(&self) -> usize {
        STATES_PER_MACHINE * self.num_generators
    }

    pub fn num_algebraic(&self) -> usize {
        2 * self.num_generators + 2 * self.num_buses
    }

    pub fn len(&self) -> usize {
        self.num_states() + self.num_algebraic()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state(&self, gen: usize, k: usize) -> usize {
        STATES_PER_MACHINE * gen + k
    }

    pub fn id(&self, gen: usize) -> usize {
        self.num_states() + 2 * gen
    }

    pub fn iq(&self, gen: usize) -> usize {
        self.num_states() + 2 * gen + 1
    }

    pub fn theta(&self, bus: usize) -> usize {
        self.num_states() + 2 * self.num_generators + 2 * self.bus_slot[bus]
    }

    pub fn v(&self, bus: usize) -> usize {
        self.theta(bus) + 1
    }
}

/// Offsets of the machine states.
pub mod state {
    pub const DELTA: usize = 0;
    pub const OMEGA: usize = 1;
    pub const EQP: usize = 2;
    pub const EDP: usize = 3;
    pub const EFD: usize = 4;
    pub const VR: usize = 5;
    pub const RF: usize = 6;
}

/// A full (possibly steady-state) point of the dynamic model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub pg: Vec<f64>,
    pub qg: Vec<f64>,
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub delta: Vec<f64>,
    pub omega: Vec<f64>,
    pub edp: Vec<f64>,
    pub eqp: Vec<f64>,
    pub efd: Vec<f64>,
    pub vr: Vec<f64>,
    pub rf: Vec<f64>,
    pub id: Vec<f64>,
    pub iq: Vec<f64>,
    pub tm: Vec<f64>,
    pub vref: Vec<f64>,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum InitError {
    #[error("generator {gen}: terminal voltage is zero, rotor angle undefined")]
    Degenerate { gen: usize },
    #[error("generator {gen}: initialization residual {residual:.3e} exceeds 1e-8")]
    Residual { gen: usize, residual: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Electrical torque `(E'q − X'd I_d) I_q + (E'd + X'q I_q) I_d`.
pub fn electrical_torque(m: &MachineDynamics, eqp: f64, edp: f64, id: f64, iq: f64) -> f64 {
    (eqp - m.xdp * id) * iq + (edp + m.xqp * iq) * id
}

/// Steady-state exciter quantities `(V_R, R_F)` for a field voltage.
pub fn exciter_steady_state(e: &ExciterParams, efd: f64) -> (f64, f64) {
    ((e.ke + e.saturation(efd)) * efd, e.kf / e.tf * efd)
}

/// Solves the machine and exciter equilibrium for a given electrical state.
///
/// The rotor angle comes from `E = V + (R_s + jX_q) I`, after which the
/// stator, field and exciter quantities follow in closed form.
pub fn steady_state_init(
    case: &NetworkCase,
    pg: &[f64],
    qg: &[f64],
    v: &[f64],
    theta: &[f64],
) -> Result<OperatingPoint, InitError> {
    let g = case.num_generators();
    let nb = case.num_buses();
    if pg.len() != g || qg.len() != g || v.len() != nb || theta.len() != nb {
        return Err(InitError::Dimension(format!(
            "expected {g} generators and {nb} buses, got pg {}, qg {}, v {}, theta {}",
            pg.len(),
            qg.len(),
            v.len(),
            theta.len()
        )));
    }
    let mut op = OperatingPoint {
        pg: pg.to_vec(),
        qg: qg.to_vec(),
        v: v.to_vec(),
        theta: theta.to_vec(),
        delta: vec![0.0; g],
        omega: vec![0.0; g],
        edp: vec![0.0; g],
        eqp: vec![0.0; g],
        efd: vec![0.0; g],
        vr: vec![0.0; g],
        rf: vec![0.0; g],
        id: vec![0.0; g],
        iq: vec![0.0; g],
        tm: vec![0.0; g],
        vref: vec![0.0; g],
    };
    for (k, (gen, b)) in case.generators.iter().zip(case.generator_buses()).enumerate() {
        let m = &gen.machine;
        let vt = v[b];
        if !(vt.abs() > 1e-12) {
            return Err(InitError::Degenerate { gen: k });
        }
        let vc = Complex64::from_polar(vt, theta[b]);
        let s = Complex64::new(pg[k], qg[k]);
        let i = (s / vc).conj();
        let e = vc + Complex64::new(m.rs, m.xq) * i;
        if e.norm() < 1e-12 {
            return Err(InitError::Degenerate { gen: k });
        }
        let delta = e.arg();
        let rot = Complex64::from_polar(1.0, -(delta - std::f64::consts::FRAC_PI_2));
        let idq = i * rot;
        let (id, iq) = (idq.re, idq.im);
        let phi = delta - theta[b];
        let (vd, vq) = (vt * phi.sin(), vt * phi.cos());
        let edp = (m.xq - m.xqp) * iq;
        let eqp = vq + m.rs * iq + m.xdp * id;
        let efd = eqp + (m.xd - m.xdp) * id;
        let (vr, rf) = exciter_steady_state(&gen.exciter, efd);

        let residual = [
            edp - vd - m.rs * id + m.xqp * iq,
            eqp - vq - m.rs * iq - m.xdp * id,
            pg[k] - vt * id * phi.sin() - vt * iq * phi.cos(),
            qg[k] - vt * id * phi.cos() + vt * iq * phi.sin(),
            efd - eqp - (m.xd - m.xdp) * id,
            edp - (m.xq - m.xqp) * iq,
        ]
        .iter()
        .fold(0.0f64, |a, r| a.max(r.abs()));
        if !(residual <= 1e-8) {
            return Err(InitError::Residual { gen: k, residual });
        }

        op.delta[k] = delta;
        op.omega[k] = m.omega_s;
        op.id[k] = id;
        op.iq[k] = iq;
        op.edp[k] = edp;
        op.eqp[k] = eqp;
        op.efd[k] = efd;
        op.vr[k] = vr;
        op.rf[k] = rf;
        op.tm[k] = electrical_torque(m, eqp, edp, id, iq);
        op.vref[k] = vt + vr / gen.exciter.ka;
    }
    Ok(op)
}

/// Receives residual values, Jacobian entries and (optionally) second
/// derivatives from [`DaeModel::stamp`]. All calls accumulate.
pub(crate) trait Sink {
    const HESSIAN: bool;
    fn value(&mut self, row: usize, v: f64);
    fn jac(&mut self, row: usize, col: usize, v: f64);
    /// `∂²F_row/∂z_a∂z_b`; each unordered pair is reported once.
    fn hess(&mut self, _row: usize, _a: usize, _b: usize, _v: f64) {}
}

/// Residual and dense Jacobian.
pub(crate) struct DenseSink {
    pub f: Vec<f64>,
    pub j: DMatrix<f64>,
}

impl DenseSink {
    pub fn new(n: usize) -> Self {
        Self {
            f: vec![0.0; n],
            j: DMatrix::zeros(n, n),
        }
    }
}

impl Sink for DenseSink {
    const HESSIAN: bool = false;
    fn value(&mut self, row: usize, v: f64) {
        self.f[row] += v;
    }
    fn jac(&mut self, row: usize, col: usize, v: f64) {
        self.j[(row, col)] += v;
    }
}

/// Residual only.
pub(crate) struct ResidualSink {
    pub f: Vec<f64>,
}

impl Sink for ResidualSink {
    const HESSIAN: bool = false;
    fn value(&mut self, row: usize, v: f64) {
        self.f[row] += v;
    }
    fn jac(&mut self, _: usize, _: usize, _: f64) {}
}

/// Accumulates `g_b = Σ_r ℓ_r Σ_a ∂²F_r/∂z_a∂z_b · r_a`, i.e. the gradient
/// of `ℓᵀ J(z) r` for fixed complex vectors `ℓ`, `r`.
pub(crate) struct ContractionSink<'a> {
    pub left: &'a [Complex64],
    pub right: &'a [Complex64],
    pub grad: Vec<Complex64>,
}

impl Sink for ContractionSink<'_> {
    const HESSIAN: bool = true;
    fn value(&mut self, _: usize, _: f64) {}
    fn jac(&mut self, _: usize, _: usize, _: f64) {}
    fn hess(&mut self, row: usize, a: usize, b: usize, v: f64) {
        let w = self.left[row] * v;
        self.grad[b] += w * self.right[a];
        if a != b {
            self.grad[a] += w * self.right[b];
        }
    }
}

/// The dynamic model of a case with (mutable) constant-power loads.
#[derive(Debug, Clone)]
pub struct DaeModel {
    pub case: NetworkCase,
    pub net: Network,
    pub layout: DaeLayout,
    pub gen_bus: Vec<usize>,
    pub pl: Vec<f64>,
    pub ql: Vec<f64>,
}

impl DaeModel {
    pub fn new(case: &NetworkCase) -> Self {
        Self {
            case: case.clone(),
            net: Network::new(case),
            layout: DaeLayout::new(case),
            gen_bus: case.generator_buses(),
            pl: case.buses.iter().map(|b| b.pl).collect(),
            ql: case.buses.iter().map(|b| b.ql).collect(),
        }
    }

    pub fn num_generators(&self) -> usize {
        self.layout.num_generators
    }

    /// Packs the dynamic part of `op` as `z = [s; y]`.
    pub fn pack(&self, op: &OperatingPoint) -> Vec<f64> {
        let l = &self.layout;
        let mut z = vec![0.0; l.len()];
        for k in 0..l.num_generators {
            z[l.state(k, state::DELTA)] = op.delta[k];
            z[l.state(k, state::OMEGA)] = op.omega[k];
            z[l.state(k, state::EQP)] = op.eqp[k];
            z[l.state(k, state::EDP)] = op.edp[k];
            z[l.state(k, state::EFD)] = op.efd[k];
            z[l.state(k, state::VR)] = op.vr[k];
            z[l.state(k, state::RF)] = op.rf[k];
            z[l.id(k)] = op.id[k];
            z[l.iq(k)] = op.iq[k];
        }
        for b in 0..l.num_buses {
            z[l.theta(b)] = op.theta[b];
            z[l.v(b)] = op.v[b];
        }
        z
    }

    /// Writes `z` back into `op` (inputs and dispatch are left untouched,
    /// except that terminal powers are recomputed).
    pub fn unpack(&self, z: &[f64], op: &mut OperatingPoint) {
        let l = &self.layout;
        for k in 0..l.num_generators {
            op.delta[k] = z[l.state(k, state::DELTA)];
            op.omega[k] = z[l.state(k, state::OMEGA)];
            op.eqp[k] = z[l.state(k, state::EQP)];
            op.edp[k] = z[l.state(k, state::EDP)];
            op.efd[k] = z[l.state(k, state::EFD)];
            op.vr[k] = z[l.state(k, state::VR)];
            op.rf[k] = z[l.state(k, state::RF)];
            op.id[k] = z[l.id(k)];
            op.iq[k] = z[l.iq(k)];
        }
        for b in 0..l.num_buses {
            op.theta[b] = z[l.theta(b)];
            op.v[b] = z[l.v(b)];
        }
        for k in 0..l.num_generators {
            let b = self.gen_bus[k];
            let phi = op.delta[k] - op.theta[b];
            let (s, c) = phi.sin_cos();
            op.pg[k] = op.v[b] * (op.id[k] * s + op.iq[k] * c);
            op.qg[k] = op.v[b] * (op.id[k] * c - op.iq[k] * s);
        }
    }

    /// Residual `F(z; u)` of the full DAE (differential rows first).
    pub fn residual(&self, z: &[f64], tm: &[f64], vref: &[f64]) -> Vec<f64> {
        let mut sink = ResidualSink {
            f: vec![0.0; self.layout.len()],
        };
        self.stamp(z, tm, vref, &mut sink);
        sink.f
    }

    /// Residual and Jacobian `∂F/∂z`.
    pub fn residual_and_jacobian(&self, z: &[f64], tm: &[f64], vref: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let mut sink = DenseSink::new(self.layout.len());
        self.stamp(z, tm, vref, &mut sink);
        (sink.f, sink.j)
    }

    pub(crate) fn stamp<S: Sink>(&self, z: &[f64], tm: &[f64], vref: &[f64], sink: &mut S) {
        let l = &self.layout;
        for (k, gen) in self.case.generators.iter().enumerate() {
            let m = &gen.machine;
            let e = &gen.exciter;
            let b = self.gen_bus[k];
            let [d, w, eq, ed, efd, vr, rf] = std::array::from_fn(|j| l.state(k, j));
            let (idc, iqc, th, vv) = (l.id(k), l.iq(k), l.theta(b), l.v(b));
            let delta = z[d];
            let omega = z[w];
            let eqp = z[eq];
            let edp = z[ed];
            let ef = z[efd];
            let vrv = z[vr];
            let rfv = z[rf];
            let id = z[idc];
            let iq = z[iqc];
            let theta = z[th];
            let v = z[vv];

            // Swing equations.
            sink.value(d, omega - m.omega_s);
            sink.jac(d, w, 1.0);

            let inv_m = 1.0 / m.m;
            let dx = m.xdp - m.xqp;
            sink.value(
                w,
                inv_m * (tm[k] - eqp * iq + dx * id * iq - edp * id - m.d * (omega - m.omega_s)),
            );
            sink.jac(w, w, -m.d * inv_m);
            sink.jac(w, eq, -iq * inv_m);
            sink.jac(w, ed, -id * inv_m);
            sink.jac(w, idc, (dx * iq - edp) * inv_m);
            sink.jac(w, iqc, (dx * id - eqp) * inv_m);
            if S::HESSIAN {
                sink.hess(w, eq, iqc, -inv_m);
                sink.hess(w, ed, idc, -inv_m);
                sink.hess(w, idc, iqc, dx * inv_m);
            }

            // Transient EMFs.
            let t = 1.0 / m.td0p;
            sink.value(eq, t * (-eqp - (m.xd - m.xdp) * id + ef));
            sink.jac(eq, eq, -t);
            sink.jac(eq, idc, -(m.xd - m.xdp) * t);
            sink.jac(eq, efd, t);

            let t = 1.0 / m.tq0p;
            sink.value(ed, t * (-edp + (m.xq - m.xqp) * iq));
            sink.jac(ed, ed, -t);
            sink.jac(ed, iqc, (m.xq - m.xqp) * t);

            // Exciter.
            let se = e.saturation(ef);
            let t = 1.0 / e.te;
            sink.value(efd, t * (-(e.ke + se) * ef + vrv));
            sink.jac(efd, efd, -t * (e.ke + se * (1.0 + e.be * ef)));
            sink.jac(efd, vr, t);
            if S::HESSIAN {
                sink.hess(efd, efd, efd, -t * se * e.be * (2.0 + e.be * ef));
            }

            let t = 1.0 / e.ta;
            sink.value(vr, t * (-vrv + e.ka * rfv - e.ka * e.kf / e.tf * ef + e.ka * (vref[k] - v)));
            sink.jac(vr, vr, -t);
            sink.jac(vr, rf, e.ka * t);
            sink.jac(vr, efd, -e.ka * e.kf / e.tf * t);
            sink.jac(vr, vv, -e.ka * t);

            let t = 1.0 / e.tf;
            sink.value(rf, t * (-rfv + e.kf / e.tf * ef));
            sink.jac(rf, rf, -t);
            sink.jac(rf, efd, e.kf / e.tf * t);

            // Stator.
            let (sp, cp) = (delta - theta).sin_cos();
            sink.value(idc, edp - v * sp - m.rs * id + m.xqp * iq);
            sink.jac(idc, ed, 1.0);
            sink.jac(idc, vv, -sp);
            sink.jac(idc, d, -v * cp);
            sink.jac(idc, th, v * cp);
            sink.jac(idc, idc, -m.rs);
            sink.jac(idc, iqc, m.xqp);
            if S::HESSIAN {
                sink.hess(idc, d, d, v * sp);
                sink.hess(idc, th, th, v * sp);
                sink.hess(idc, d, th, -v * sp);
                sink.hess(idc, vv, d, -cp);
                sink.hess(idc, vv, th, cp);
            }

            sink.value(iqc, eqp - v * cp - m.rs * iq - m.xdp * id);
            sink.jac(iqc, eq, 1.0);
            sink.jac(iqc, vv, -cp);
            sink.jac(iqc, d, v * sp);
            sink.jac(iqc, th, -v * sp);
            sink.jac(iqc, iqc, -m.rs);
            sink.jac(iqc, idc, -m.xdp);
            if S::HESSIAN {
                sink.hess(iqc, d, d, v * cp);
                sink.hess(iqc, th, th, v * cp);
                sink.hess(iqc, d, th, -v * cp);
                sink.hess(iqc, vv, d, sp);
                sink.hess(iqc, vv, th, -sp);
            }

            // Generator injection into the bus balance rows.
            let a = id * sp + iq * cp;
            let bb = id * cp - iq * sp;
            let (rp, rq) = (th, vv);
            sink.value(rp, v * a);
            sink.jac(rp, idc, v * sp);
            sink.jac(rp, iqc, v * cp);
            sink.jac(rp, vv, a);
            sink.jac(rp, d, v * bb);
            sink.jac(rp, th, -v * bb);
            if S::HESSIAN {
                sink.hess(rp, idc, vv, sp);
                sink.hess(rp, idc, d, v * cp);
                sink.hess(rp, idc, th, -v * cp);
                sink.hess(rp, iqc, vv, cp);
                sink.hess(rp, iqc, d, -v * sp);
                sink.hess(rp, iqc, th, v * sp);
                sink.hess(rp, vv, d, bb);
                sink.hess(rp, vv, th, -bb);
                sink.hess(rp, d, d, -v * a);
                sink.hess(rp, th, th, -v * a);
                sink.hess(rp, d, th, v * a);
            }
            sink.value(rq, v * bb);
            sink.jac(rq, idc, v * cp);
            sink.jac(rq, iqc, -v * sp);
            sink.jac(rq, vv, bb);
            sink.jac(rq, d, -v * a);
            sink.jac(rq, th, v * a);
            if S::HESSIAN {
                sink.hess(rq, idc, vv, cp);
                sink.hess(rq, idc, d, -v * sp);
                sink.hess(rq, idc, th, v * sp);
                sink.hess(rq, iqc, vv, -sp);
                sink.hess(rq, iqc, d, -v * cp);
                sink.hess(rq, iqc, th, v * cp);
                sink.hess(rq, vv, d, -a);
                sink.hess(rq, vv, th, a);
                sink.hess(rq, d, d, -v * bb);
                sink.hess(rq, th, th, -v * bb);
                sink.hess(rq, d, th, v * bb);
            }
        }

        // Bus balances: −P_L − P(V, θ) and −Q_L − Q(V, θ).
        let net = &self.net;
        for i in 0..l.num_buses {
            let (ti, vi_c) = (l.theta(i), l.v(i));
            let (rp, rq) = (ti, vi_c);
            let vi = z[vi_c];
            let thi = z[ti];
            let (gii, bii) = (net.g[(i, i)], net.b[(i, i)]);
            sink.value(rp, -self.pl[i] - vi * vi * gii);
            sink.jac(rp, vi_c, -2.0 * vi * gii);
            sink.value(rq, -self.ql[i] + vi * vi * bii);
            sink.jac(rq, vi_c, 2.0 * vi * bii);
            if S::HESSIAN {
                sink.hess(rp, vi_c, vi_c, -2.0 * gii);
                sink.hess(rq, vi_c, vi_c, 2.0 * bii);
            }
            for &j in &net.neighbors[i] {
                let (tj, vj_c) = (l.theta(j), l.v(j));
                let vj = z[vj_c];
                let t = thi - z[tj];
                let (gij, bij) = (net.g[(i, j)], net.b[(i, j)]);
                for (row, (u, du, d2u)) in [(rp, p_factor(gij, bij, t)), (rq, q_factor(gij, bij, t))] {
                    let vv = vi * vj;
                    sink.value(row, -vv * u);
                    sink.jac(row, ti, -vv * du);
                    sink.jac(row, tj, vv * du);
                    sink.jac(row, vi_c, -vj * u);
                    sink.jac(row, vj_c, -vi * u);
                    if S::HESSIAN {
                        sink.hess(row, ti, ti, -vv * d2u);
                        sink.hess(row, tj, tj, -vv * d2u);
                        sink.hess(row, ti, tj, vv * d2u);
                        sink.hess(row, ti, vi_c, -vj * du);
                        sink.hess(row, ti, vj_c, -vi * du);
                        sink.hess(row, tj, vi_c, vj * du);
                        sink.hess(row, tj, vj_c, vi * du);
                        sink.hess(row, vi_c, vj_c, -u);
                    }
                }
            }
        }
    }
}
