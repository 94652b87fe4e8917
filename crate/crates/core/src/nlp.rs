//! The stability-constrained OPF as a nonsmooth NLP.
//!
//! Variables `x = [P_G, Q_G, V, θ, δ, E'd, E'q, I_d, I_q, E_fd]`, with the
//! angle of the reference bus removed. Equalities, in order: bus active
//! balance, bus reactive balance, stator d, stator q, terminal P, terminal Q,
//! field d, field q. Inequalities: `V`, `P_G`, `Q_G`, squared from-bus line
//! currents and, optionally, `η(x) ≤ η̄`.

use std::ops::Range;
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use sqpgs::{Derivatives, EvalError, FunctionId, Monitor, NlpProblem, Values};

use crate::case::{line_current, NetworkCase};
use crate::dae::{exciter_steady_state, state, steady_state_init, DaeModel, OperatingPoint};
use crate::network::{solve_power_flow, Network};
use crate::smallsignal::{analyze_point, spectral_abscissa_gradient, ModalOptions, ModalResult, SmallSignalError};

/// Offsets of the variable groups within `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableLayout {
    pub num_generators: usize,
    pub num_buses: usize,
    pub reference_bus: usize,
    pub pg: Range<usize>,
    pub qg: Range<usize>,
    pub v: Range<usize>,
    pub theta: Range<usize>,
    pub delta: Range<usize>,
    pub edp: Range<usize>,
    pub eqp: Range<usize>,
    pub id: Range<usize>,
    pub iq: Range<usize>,
    pub efd: Range<usize>,
}

impl VariableLayout {
    pub fn new(case: &NetworkCase) -> Self {
        let g = case.num_generators();
        let nb = case.num_buses();
        let mut at = 0;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        Self {
            num_generators: g,
            num_buses: nb,
            reference_bus: case.reference_bus(),
            pg: take(g),
            qg: take(g),
            v: take(nb),
            theta: take(nb - 1),
            delta: take(g),
            edp: take(g),
            eqp: take(g),
            id: take(g),
            iq: take(g),
            efd: take(g),
        }
    }

    pub fn len(&self) -> usize {
        self.efd.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Column of `θ_bus`, `None` for the reference bus.
    pub fn theta_index(&self, bus: usize) -> Option<usize> {
        match bus.cmp(&self.reference_bus) {
            std::cmp::Ordering::Less => Some(self.theta.start + bus),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(self.theta.start + bus - 1),
        }
    }

    pub fn theta_of(&self, x: &[f64], bus: usize) -> f64 {
        self.theta_index(bus).map_or(0.0, |i| x[i])
    }

    /// Packs an operating point, shifting angles so the reference is zero.
    pub fn pack(&self, op: &OperatingPoint) -> Vec<f64> {
        let mut x = vec![0.0; self.len()];
        let shift = op.theta[self.reference_bus];
        x[self.pg.clone()].copy_from_slice(&op.pg);
        x[self.qg.clone()].copy_from_slice(&op.qg);
        x[self.v.clone()].copy_from_slice(&op.v);
        for b in 0..self.num_buses {
            if let Some(i) = self.theta_index(b) {
                x[i] = op.theta[b] - shift;
            }
        }
        for k in 0..self.num_generators {
            x[self.delta.start + k] = op.delta[k] - shift;
        }
        x[self.edp.clone()].copy_from_slice(&op.edp);
        x[self.eqp.clone()].copy_from_slice(&op.eqp);
        x[self.id.clone()].copy_from_slice(&op.id);
        x[self.iq.clone()].copy_from_slice(&op.iq);
        x[self.efd.clone()].copy_from_slice(&op.efd);
        x
    }

    pub fn all_theta(&self, x: &[f64]) -> Vec<f64> {
        (0..self.num_buses).map(|b| self.theta_of(x, b)).collect()
    }
}

/// One-line description of variable `i`.
fn describe(layout: &VariableLayout, case: &NetworkCase, i: usize) -> String {
    let gen_bus = |k: usize| case.generators[k].bus;
    let groups: [(&str, &Range<usize>, bool); 10] = [
        ("PG", &layout.pg, true),
        ("QG", &layout.qg, true),
        ("V", &layout.v, false),
        ("theta", &layout.theta, false),
        ("delta", &layout.delta, true),
        ("Edp", &layout.edp, true),
        ("Eqp", &layout.eqp, true),
        ("Id", &layout.id, true),
        ("Iq", &layout.iq, true),
        ("Efd", &layout.efd, true),
    ];
    for (name, r, per_gen) in groups {
        if r.contains(&i) {
            let k = i - r.start;
            if per_gen {
                return format!("{name}[gen@bus{}]", gen_bus(k));
            }
            let bus = if name == "theta" && k >= layout.reference_bus { k + 1 } else { k };
            return format!("{name}[bus{}]", case.buses[bus].id);
        }
    }
    format!("x[{i}]")
}

/// Per-function timings collected while the solver runs.
#[derive(Debug, Default)]
struct Profile {
    eigen: f64,
    sensitivity: f64,
}

/// Default multiplier on the $/h cost.
pub const DEFAULT_OBJECTIVE_SCALE: f64 = 1e-3;

/// Solver settings used for the bundled cases: the library defaults with a
/// relaxed Armijo constant, tighter tolerances and a larger iteration cap.
pub fn default_solver_params() -> sqpgs::SolverParams {
    sqpgs::SolverParams {
        varpi: 1e-4,
        nu_s: 1e-6,
        nu_in: 1e-6,
        k_max: 200,
        ..sqpgs::SolverParams::default()
    }
}

/// The SSSC-OPF instance.
pub struct SsscOpf {
    pub case: NetworkCase,
    pub layout: VariableLayout,
    pub model: DaeModel,
    pub eta_bar: Option<f64>,
    pub modal_options: ModalOptions,
    /// Multiplies the $/h cost before it is handed to the solver.
    pub objective_scale: f64,
    net: Network,
    gen_at_bus: Vec<Option<usize>>,
    profile: Mutex<Profile>,
}

impl SsscOpf {
    /// Builds the problem; `eta_bar = None` gives the standard OPF.
    pub fn new(case: &NetworkCase, eta_bar: Option<f64>) -> Self {
        Self {
            case: case.clone(),
            layout: VariableLayout::new(case),
            model: DaeModel::new(case),
            eta_bar,
            modal_options: ModalOptions::default(),
            objective_scale: DEFAULT_OBJECTIVE_SCALE,
            net: Network::new(case),
            gen_at_bus: case.generator_at_bus(),
            profile: Mutex::new(Profile::default()),
        }
    }

    pub fn with_objective_scale(mut self, scale: f64) -> Self {
        self.objective_scale = scale;
        self
    }

    /// Index of the spectral row among the inequalities.
    pub fn spectral_row(&self) -> Option<usize> {
        self.eta_bar.map(|_| self.layout.num_buses + 2 * self.layout.num_generators + self.case.lines.len())
    }

    /// Generation cost in $/h.
    pub fn cost(&self, x: &[f64]) -> f64 {
        self.case.generation_cost(&x[self.layout.pg.clone()])
    }

    /// DAE vector at `x` with `ω = ω_s` and exciter states at equilibrium.
    pub fn dae_point(&self, x: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        let dl = &self.model.layout;
        let mut z = vec![0.0; dl.len()];
        for (k, gen) in self.case.generators.iter().enumerate() {
            let efd = x[l.efd.start + k];
            let (vr, rf) = exciter_steady_state(&gen.exciter, efd);
            z[dl.state(k, state::DELTA)] = x[l.delta.start + k];
            z[dl.state(k, state::OMEGA)] = gen.machine.omega_s;
            z[dl.state(k, state::EQP)] = x[l.eqp.start + k];
            z[dl.state(k, state::EDP)] = x[l.edp.start + k];
            z[dl.state(k, state::EFD)] = efd;
            z[dl.state(k, state::VR)] = vr;
            z[dl.state(k, state::RF)] = rf;
            z[dl.id(k)] = x[l.id.start + k];
            z[dl.iq(k)] = x[l.iq.start + k];
        }
        for b in 0..l.num_buses {
            z[dl.theta(b)] = l.theta_of(x, b);
            z[dl.v(b)] = x[l.v.start + b];
        }
        z
    }

    /// Full operating point at `x`, including the steady-state inputs.
    pub fn operating_point(&self, x: &[f64]) -> OperatingPoint {
        let l = &self.layout;
        let g = l.num_generators;
        let mut op = OperatingPoint {
            pg: x[l.pg.clone()].to_vec(),
            qg: x[l.qg.clone()].to_vec(),
            v: x[l.v.clone()].to_vec(),
            theta: l.all_theta(x),
            delta: x[l.delta.clone()].to_vec(),
            omega: self.case.generators.iter().map(|gen| gen.machine.omega_s).collect(),
            edp: x[l.edp.clone()].to_vec(),
            eqp: x[l.eqp.clone()].to_vec(),
            efd: x[l.efd.clone()].to_vec(),
            vr: vec![0.0; g],
            rf: vec![0.0; g],
            id: x[l.id.clone()].to_vec(),
            iq: x[l.iq.clone()].to_vec(),
            tm: vec![0.0; g],
            vref: vec![0.0; g],
        };
        for (k, gen) in self.case.generators.iter().enumerate() {
            let (vr, rf) = exciter_steady_state(&gen.exciter, op.efd[k]);
            op.vr[k] = vr;
            op.rf[k] = rf;
            op.tm[k] = crate::dae::electrical_torque(&gen.machine, op.eqp[k], op.edp[k], op.id[k], op.iq[k]);
            op.vref[k] = op.v[gen.bus_index(&self.case)] + vr / gen.exciter.ka;
        }
        op
    }

    /// Modal analysis of the state matrix at `x`.
    pub fn modal(&self, x: &[f64]) -> Result<ModalResult, SmallSignalError> {
        Ok(analyze_point(&self.model, &self.dae_point(x), &self.modal_options)?.1)
    }

    fn spectral(&self, x: &[f64], with_gradient: bool) -> Result<(f64, Vec<f64>), EvalError> {
        let t0 = Instant::now();
        let z = self.dae_point(x);
        let (sm, modal) = analyze_point(&self.model, &z, &self.modal_options)
            .map_err(|e| EvalError::Failed(format!("spectral constraint: {e}")))?;
        let t1 = Instant::now();
        let mut grad = Vec::new();
        if with_gradient {
            let gz = spectral_abscissa_gradient(&self.model, &z, &sm, &modal);
            grad = self.map_dae_gradient(&gz);
        }
        let t2 = Instant::now();
        if let Ok(mut p) = self.profile.lock() {
            p.eigen += (t1 - t0).as_secs_f64();
            p.sensitivity += (t2 - t1).as_secs_f64();
        }
        if !modal.eta.is_finite() {
            return Err(EvalError::NonFinite("spectral abscissa".into()));
        }
        Ok((modal.eta, grad))
    }

    /// Maps `∂/∂z` over DAE variables onto `x`. The Jacobian does not depend
    /// on `ω`, `V_R` or `R_F`, so only the shared coordinates contribute.
    pub fn map_dae_gradient(&self, gz: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        let dl = &self.model.layout;
        let mut gx = vec![0.0; l.len()];
        for k in 0..l.num_generators {
            gx[l.delta.start + k] = gz[dl.state(k, state::DELTA)];
            gx[l.eqp.start + k] = gz[dl.state(k, state::EQP)];
            gx[l.edp.start + k] = gz[dl.state(k, state::EDP)];
            gx[l.efd.start + k] = gz[dl.state(k, state::EFD)];
            gx[l.id.start + k] = gz[dl.id(k)];
            gx[l.iq.start + k] = gz[dl.iq(k)];
        }
        for b in 0..l.num_buses {
            if let Some(i) = l.theta_index(b) {
                gx[i] = gz[dl.theta(b)];
            }
            gx[l.v.start + b] = gz[dl.v(b)];
        }
        gx
    }

    /// Objective gradient in $/h per unit of `x`.
    fn cost_gradient(&self, x: &[f64]) -> Vec<f64> {
        let base = self.case.base_mva;
        let mut g = vec![0.0; self.layout.len()];
        for (k, gen) in self.case.generators.iter().enumerate() {
            let p = x[self.layout.pg.start + k] * base;
            g[self.layout.pg.start + k] = (2.0 * gen.cost.a2 * p + gen.cost.a1) * base;
        }
        g
    }

    fn smooth_values(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let l = &self.layout;
        let nb = l.num_buses;
        let g = l.num_generators;
        let v = &x[l.v.clone()];
        let theta = l.all_theta(x);
        let (p, q) = self.net.injections(v, &theta);
        let mut h = vec![0.0; self.num_equalities()];
        for (i, bus) in self.case.buses.iter().enumerate() {
            let (pg, qg) = match self.gen_at_bus[i] {
                Some(k) => (x[l.pg.start + k], x[l.qg.start + k]),
                None => (0.0, 0.0),
            };
            h[i] = pg - bus.pl - p[i];
            h[nb + i] = qg - bus.ql - q[i];
        }
        let o = 2 * nb;
        for (k, gen) in self.case.generators.iter().enumerate() {
            let m = &gen.machine;
            let b = gen.bus_index(&self.case);
            let (vb, phi) = (v[b], x[l.delta.start + k] - theta[b]);
            let (s, c) = phi.sin_cos();
            let (id, iq) = (x[l.id.start + k], x[l.iq.start + k]);
            let (edp, eqp, efd) = (x[l.edp.start + k], x[l.eqp.start + k], x[l.efd.start + k]);
            h[o + k] = edp - vb * s - m.rs * id + m.xqp * iq;
            h[o + g + k] = eqp - vb * c - m.rs * iq - m.xdp * id;
            h[o + 2 * g + k] = x[l.pg.start + k] - vb * id * s - vb * iq * c;
            h[o + 3 * g + k] = x[l.qg.start + k] - vb * id * c + vb * iq * s;
            h[o + 4 * g + k] = efd - eqp - (m.xd - m.xdp) * id;
            h[o + 5 * g + k] = edp - (m.xq - m.xqp) * iq;
        }

        let mut gv = Vec::with_capacity(self.num_inequalities());
        gv.extend_from_slice(v);
        gv.extend_from_slice(&x[l.pg.clone()]);
        gv.extend_from_slice(&x[l.qg.clone()]);
        for (line, (i, j)) in self.case.lines.iter().zip(self.case.line_ends()) {
            let cur = line_current(line, Complex64::from_polar(v[i], theta[i]), Complex64::from_polar(v[j], theta[j]));
            gv.push(cur.norm_sqr());
        }
        (self.objective_scale * self.cost(x), h, gv)
    }

    fn smooth_jacobians(&self, x: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let l = &self.layout;
        let n = l.len();
        let nb = l.num_buses;
        let g = l.num_generators;
        let v = &x[l.v.clone()];
        let theta = l.all_theta(x);
        let [pt, pv, qt, qv] = self.net.injection_jacobian(v, &theta);
        let mut jh = DMatrix::zeros(self.num_equalities(), n);
        for i in 0..nb {
            if let Some(k) = self.gen_at_bus[i] {
                jh[(i, l.pg.start + k)] = 1.0;
                jh[(nb + i, l.qg.start + k)] = 1.0;
            }
            for j in 0..nb {
                jh[(i, l.v.start + j)] = -pv[(i, j)];
                jh[(nb + i, l.v.start + j)] = -qv[(i, j)];
                if let Some(c) = l.theta_index(j) {
                    jh[(i, c)] = -pt[(i, j)];
                    jh[(nb + i, c)] = -qt[(i, j)];
                }
            }
        }
        let o = 2 * nb;
        for (k, gen) in self.case.generators.iter().enumerate() {
            let m = &gen.machine;
            let b = gen.bus_index(&self.case);
            let (vb, phi) = (v[b], x[l.delta.start + k] - theta[b]);
            let (s, c) = phi.sin_cos();
            let (id, iq) = (x[l.id.start + k], x[l.iq.start + k]);
            let cv = l.v.start + b;
            let ct = l.theta_index(b);
            let (cd, cid, ciq) = (l.delta.start + k, l.id.start + k, l.iq.start + k);
            let (ced, ceq, cef) = (l.edp.start + k, l.eqp.start + k, l.efd.start + k);
            // ∂/∂δ and ∂/∂θ of a function of φ = δ − θ.
            let mut angle = |row: usize, d: f64| {
                jh[(row, cd)] += d;
                if let Some(ct) = ct {
                    jh[(row, ct)] -= d;
                }
            };
            let r = o + k;
            angle(r, -vb * c);
            let r2 = o + g + k;
            angle(r2, vb * s);
            let a = id * s + iq * c;
            let bb = id * c - iq * s;
            let r3 = o + 2 * g + k;
            angle(r3, -vb * bb);
            let r4 = o + 3 * g + k;
            angle(r4, vb * a);

            jh[(r, ced)] = 1.0;
            jh[(r, cv)] = -s;
            jh[(r, cid)] = -m.rs;
            jh[(r, ciq)] = m.xqp;

            jh[(r2, ceq)] = 1.0;
            jh[(r2, cv)] = -c;
            jh[(r2, ciq)] = -m.rs;
            jh[(r2, cid)] = -m.xdp;

            jh[(r3, l.pg.start + k)] = 1.0;
            jh[(r3, cv)] = -a;
            jh[(r3, cid)] = -vb * s;
            jh[(r3, ciq)] = -vb * c;

            jh[(r4, l.qg.start + k)] = 1.0;
            jh[(r4, cv)] = -bb;
            jh[(r4, cid)] = -vb * c;
            jh[(r4, ciq)] = vb * s;

            let r5 = o + 4 * g + k;
            jh[(r5, cef)] = 1.0;
            jh[(r5, ceq)] = -1.0;
            jh[(r5, cid)] = -(m.xd - m.xdp);

            let r6 = o + 5 * g + k;
            jh[(r6, ced)] = 1.0;
            jh[(r6, ciq)] = -(m.xq - m.xqp);
        }

        let mut jg = DMatrix::zeros(self.num_inequalities(), n);
        let mut row = 0;
        for b in 0..nb {
            jg[(row, l.v.start + b)] = 1.0;
            row += 1;
        }
        for r in [&l.pg, &l.qg] {
            for c in r.clone() {
                jg[(row, c)] = 1.0;
                row += 1;
            }
        }
        for (line, (i, j)) in self.case.lines.iter().zip(self.case.line_ends()) {
            // |I|² = |a|²Vi² + |y|²Vj² − 2 Vi Vj Re(a ȳ e^{j(θi−θj)}), a = y + y_sh
            let ys: Complex64 = line.series_admittance.into();
            let a = ys + Complex64::from(line.shunt_admittance_half);
            let cc = a * ys.conj();
            let t = theta[i] - theta[j];
            let (st, ct) = t.sin_cos();
            let re = cc.re * ct - cc.im * st;
            let dre = -cc.re * st - cc.im * ct;
            jg[(row, l.v.start + i)] += 2.0 * a.norm_sqr() * v[i] - 2.0 * v[j] * re;
            jg[(row, l.v.start + j)] += 2.0 * ys.norm_sqr() * v[j] - 2.0 * v[i] * re;
            if let Some(c) = l.theta_index(i) {
                jg[(row, c)] += -2.0 * v[i] * v[j] * dre;
            }
            if let Some(c) = l.theta_index(j) {
                jg[(row, c)] += 2.0 * v[i] * v[j] * dre;
            }
            row += 1;
        }
        (jh, jg)
    }

    /// Flat start: unit voltages, zero angles, mid-range dispatch and machine
    /// variables initialized at that (generally infeasible) electrical point.
    pub fn flat_start(&self) -> Vec<f64> {
        let l = &self.layout;
        let g = l.num_generators;
        let mut x = vec![0.0; l.len()];
        for (k, gen) in self.case.generators.iter().enumerate() {
            x[l.pg.start + k] = 0.5 * (gen.limits.pmin + gen.limits.pmax);
            x[l.qg.start + k] = 0.5 * (gen.limits.qmin + gen.limits.qmax);
        }
        for b in 0..l.num_buses {
            x[l.v.start + b] = 1.0;
        }
        let nb = l.num_buses;
        let (v, theta) = (vec![1.0; nb], vec![0.0; nb]);
        for (k, gen) in self.case.generators.iter().enumerate() {
            let single = NetworkCase {
                generators: vec![gen.clone()],
                ..self.case.clone()
            };
            let (pg, qg) = (x[l.pg.start + k], x[l.qg.start + k]);
            let init = steady_state_init(&single, &[pg], &[qg], &v, &theta);
            let (delta, edp, eqp, id, iq, efd) = match init {
                Ok(op) if op.delta[0].is_finite() => (op.delta[0], op.edp[0], op.eqp[0], op.id[0], op.iq[0], op.efd[0]),
                _ => (0.0, 0.0, 1.0, 0.0, 0.0, 1.0),
            };
            x[l.delta.start + k] = delta;
            x[l.edp.start + k] = edp;
            x[l.eqp.start + k] = eqp;
            x[l.id.start + k] = id;
            x[l.iq.start + k] = iq;
            x[l.efd.start + k] = efd;
        }
        debug_assert_eq!(x.len(), 8 * g + 2 * nb - 1);
        x
    }

    /// A feasible point from a power flow at the given generator outputs and
    /// voltage setpoints (the reference machine balances the system).
    pub fn feasible_point(&self, pg: &[f64], vset: &[f64]) -> Option<Vec<f64>> {
        let pf = solve_power_flow(&self.case, &self.net, pg, vset, 1e-11).ok()?;
        let op = steady_state_init(&self.case, &pf.pg, &pf.qg, &pf.v, &pf.theta).ok()?;
        Some(self.layout.pack(&op))
    }

    /// A random feasible point: outputs and setpoints drawn uniformly within
    /// their limits, then completed by a power flow.
    pub fn random_feasible_point<R: Rng>(&self, rng: &mut R) -> Option<Vec<f64>> {
        let pg: Vec<f64> = self
            .case
            .generators
            .iter()
            .map(|gen| rng.random_range(gen.limits.pmin..=gen.limits.pmax))
            .collect();
        let vset: Vec<f64> = self
            .case
            .generators
            .iter()
            .map(|gen| {
                let bus = &self.case.buses[gen.bus_index(&self.case)];
                rng.random_range(bus.vmin.max(0.95)..=bus.vmax.min(1.1))
            })
            .collect();
        self.feasible_point(&pg, &vset)
    }

    /// Largest absolute equality residual at `x`.
    pub fn equality_residual(&self, x: &[f64]) -> f64 {
        self.smooth_values(x).1.iter().fold(0.0, |a, r| a.max(r.abs()))
    }
}

impl crate::case::GeneratorRecord {
    /// Position of this generator's bus within `case.buses`.
    pub fn bus_index(&self, case: &NetworkCase) -> usize {
        case.bus_index(self.bus).expect("validated case")
    }
}

impl NlpProblem for SsscOpf {
    fn dimension(&self) -> usize {
        self.layout.len()
    }

    fn num_equalities(&self) -> usize {
        2 * self.layout.num_buses + 6 * self.layout.num_generators
    }

    fn num_inequalities(&self) -> usize {
        self.layout.num_buses
            + 2 * self.layout.num_generators
            + self.case.lines.len()
            + usize::from(self.eta_bar.is_some())
    }

    fn inequality_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = Vec::with_capacity(self.num_inequalities());
        let mut hi = Vec::with_capacity(self.num_inequalities());
        for b in &self.case.buses {
            lo.push(b.vmin);
            hi.push(b.vmax);
        }
        for gen in &self.case.generators {
            lo.push(gen.limits.pmin);
            hi.push(gen.limits.pmax);
        }
        for gen in &self.case.generators {
            lo.push(gen.limits.qmin);
            hi.push(gen.limits.qmax);
        }
        for line in &self.case.lines {
            lo.push(f64::NEG_INFINITY);
            hi.push(line.imax * line.imax);
        }
        if let Some(eta_bar) = self.eta_bar {
            lo.push(f64::NEG_INFINITY);
            hi.push(eta_bar);
        }
        (lo, hi)
    }

    fn values(&self, x: &[f64]) -> Result<Values, EvalError> {
        let (f, h, mut g) = self.smooth_values(x);
        if self.eta_bar.is_some() {
            g.push(self.spectral(x, false)?.0);
        }
        finite(Values { f, h, g })
    }

    fn evaluate(&self, x: &[f64]) -> Result<(Values, Derivatives), EvalError> {
        let (f, h, mut g) = self.smooth_values(x);
        let (jac_h, mut jac_g) = self.smooth_jacobians(x);
        if let Some(row) = self.spectral_row() {
            let (eta, grad) = self.spectral(x, true)?;
            g.push(eta);
            for (c, v) in grad.into_iter().enumerate() {
                jac_g[(row, c)] = v;
            }
        }
        let grad_f = self.cost_gradient(x).into_iter().map(|v| v * self.objective_scale).collect();
        let values = finite(Values { f, h, g })?;
        Ok((values, Derivatives { grad_f, jac_h, jac_g }))
    }

    fn gradient(&self, id: FunctionId, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        match id {
            FunctionId::Objective => Ok(self.cost_gradient(x).into_iter().map(|v| v * self.objective_scale).collect()),
            FunctionId::Inequality(j) if Some(j) == self.spectral_row() => Ok(self.spectral(x, true)?.1),
            FunctionId::Equality(i) => Ok(self.smooth_jacobians(x).0.row(i).iter().copied().collect()),
            FunctionId::Inequality(j) => Ok(self.smooth_jacobians(x).1.row(j).iter().copied().collect()),
        }
    }

    fn is_nonsmooth(&self, id: FunctionId) -> bool {
        matches!(id, FunctionId::Inequality(j) if Some(j) == self.spectral_row())
    }

    fn monitor(&self, x: &[f64], detailed: bool) -> Monitor {
        match self.modal(x) {
            Ok(m) => Monitor {
                eta: Some(m.eta),
                modes: detailed.then(|| {
                    m.leading_modes(4, self.modal_options.zero_mode_tol)
                        .into_iter()
                        .map(|s| [s.re, s.im])
                        .collect()
                }),
            },
            Err(_) => Monitor::default(),
        }
    }

    fn take_profile(&self) -> Vec<(String, f64)> {
        let Ok(mut p) = self.profile.lock() else { return Vec::new() };
        let out = vec![("eigen".to_string(), p.eigen), ("sensitivity".to_string(), p.sensitivity)];
        *p = Profile::default();
        out
    }

    fn variable_name(&self, i: usize) -> String {
        describe(&self.layout, &self.case, i)
    }
}

fn finite(v: Values) -> Result<Values, EvalError> {
    if v.f.is_finite() && v.h.iter().chain(v.g.iter()).all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(EvalError::NonFinite("function values".into()))
    }
}
