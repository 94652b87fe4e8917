//! Network, machine and exciter data.
//!
//! Case files are JSON. Powers may be given in MW/MVAr by setting
//! `"power_unit": "mw"`; they are converted to per-unit on `base_mva` when
//! loaded and always saved in per-unit.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::data;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexValue {
    pub re: f64,
    pub im: f64,
}

impl From<ComplexValue> for Complex64 {
    fn from(c: ComplexValue) -> Self {
        Complex64::new(c.re, c.im)
    }
}

impl From<Complex64> for ComplexValue {
    fn from(c: Complex64) -> Self {
        Self { re: c.re, im: c.im }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Generator,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusRecord {
    pub id: usize,
    pub kind: BusKind,
    pub pl: f64,
    pub ql: f64,
    pub vmin: f64,
    pub vmax: f64,
    #[serde(default)]
    pub angle_reference: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineRecord {
    pub from: usize,
    pub to: usize,
    pub series_admittance: ComplexValue,
    pub shunt_admittance_half: ComplexValue,
    pub imax: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCoefficients {
    pub a2: f64,
    pub a1: f64,
    pub a0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLimits {
    pub pmin: f64,
    pub pmax: f64,
    pub qmin: f64,
    pub qmax: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MachineDynamics {
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "D")]
    pub d: f64,
    pub xd: f64,
    pub xq: f64,
    pub xdp: f64,
    pub xqp: f64,
    pub td0p: f64,
    pub tq0p: f64,
    pub rs: f64,
    pub omega_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExciterParams {
    pub ka: f64,
    pub ta: f64,
    pub ke: f64,
    pub te: f64,
    pub kf: f64,
    pub tf: f64,
    pub ae: f64,
    pub be: f64,
}

impl ExciterParams {
    /// Saturation function `S_E(E_fd) = A_e·exp(B_e·E_fd)`.
    pub fn saturation(&self, efd: f64) -> f64 {
        self.ae * (self.be * efd).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRecord {
    pub bus: usize,
    pub cost: CostCoefficients,
    pub limits: GeneratorLimits,
    pub machine: MachineDynamics,
    pub exciter: ExciterParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerUnit {
    #[default]
    Pu,
    Mw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCase {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub base_mva: f64,
    #[serde(default, skip_serializing_if = "is_pu")]
    pub power_unit: PowerUnit,
    pub buses: Vec<BusRecord>,
    pub lines: Vec<LineRecord>,
    pub generators: Vec<GeneratorRecord>,
}

fn is_pu(u: &PowerUnit) -> bool {
    *u == PowerUnit::Pu
}

/// One validation finding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub locator: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.locator, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CaseError {
    #[error("cannot read case file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed case file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid case: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Validation(Vec<Diagnostic>),
    #[error("unknown case `{0}` (not a file and not a bundled case)")]
    Unknown(String),
}

impl NetworkCase {
    pub fn from_json_str(text: &str) -> Result<Self, CaseError> {
        let mut case: NetworkCase = serde_json::from_str(text)?;
        case.to_per_unit();
        let diags = validate_case(&case);
        if !diags.is_empty() {
            return Err(CaseError::Validation(diags));
        }
        Ok(case)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("case serialization cannot fail")
    }

    fn to_per_unit(&mut self) {
        if self.power_unit == PowerUnit::Mw {
            let b = self.base_mva;
            for bus in &mut self.buses {
                bus.pl /= b;
                bus.ql /= b;
            }
            for g in &mut self.generators {
                g.limits.pmin /= b;
                g.limits.pmax /= b;
                g.limits.qmin /= b;
                g.limits.qmax /= b;
            }
            self.power_unit = PowerUnit::Pu;
        }
    }

    pub fn num_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn num_generators(&self) -> usize {
        self.generators.len()
    }

    /// Position of the bus with identifier `id`.
    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn reference_bus(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.angle_reference)
            .expect("validated case has a reference bus")
    }

    /// Bus position of each generator.
    pub fn generator_buses(&self) -> Vec<usize> {
        self.generators
            .iter()
            .map(|g| self.bus_index(g.bus).expect("validated generator bus"))
            .collect()
    }

    /// Generator serving each bus, if any.
    pub fn generator_at_bus(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.buses.len()];
        for (k, b) in self.generator_buses().into_iter().enumerate() {
            out[b] = Some(k);
        }
        out
    }

    /// `(from, to)` bus positions of each line.
    pub fn line_ends(&self) -> Vec<(usize, usize)> {
        self.lines
            .iter()
            .map(|l| (self.bus_index(l.from).unwrap(), self.bus_index(l.to).unwrap()))
            .collect()
    }

    /// Generation cost in $/h for per-unit outputs `pg`.
    pub fn generation_cost(&self, pg: &[f64]) -> f64 {
        self.generators
            .iter()
            .zip(pg)
            .map(|(g, &p)| {
                let mw = p * self.base_mva;
                g.cost.a2 * mw * mw + g.cost.a1 * mw + g.cost.a0
            })
            .sum()
    }
}

pub fn load_case(path: impl AsRef<Path>) -> Result<NetworkCase, CaseError> {
    let text = std::fs::read_to_string(path)?;
    NetworkCase::from_json_str(&text)
}

pub fn save_case(case: &NetworkCase, path: impl AsRef<Path>) -> Result<(), CaseError> {
    std::fs::write(path, case.to_json_string())?;
    Ok(())
}

/// Names of the cases shipped with the crate.
pub fn bundled_case_names() -> &'static [&'static str] {
    data::NAMES
}

pub fn bundled_case(name: &str) -> Result<NetworkCase, CaseError> {
    let text = data::lookup(name).ok_or_else(|| CaseError::Unknown(name.to_string()))?;
    NetworkCase::from_json_str(text)
}

/// Loads `name` as a file path if it exists, otherwise as a bundled name.
pub fn resolve_case(name: &str) -> Result<NetworkCase, CaseError> {
    if Path::new(name).is_file() {
        load_case(name)
    } else {
        bundled_case(name)
    }
}

pub fn validate_case(case: &NetworkCase) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |locator: String, message: String| out.push(Diagnostic { locator, message });

    if !(case.base_mva > 0.0) {
        push("base_mva".into(), format!("must be positive, got {}", case.base_mva));
    }
    if case.buses.is_empty() {
        push("buses".into(), "case has no buses".into());
    }

    let mut seen = HashSet::new();
    for b in &case.buses {
        let loc = format!("bus {}", b.id);
        if !seen.insert(b.id) {
            push(loc.clone(), format!("duplicate bus id {}", b.id));
        }
        if !(b.vmin > 0.0 && b.vmin < b.vmax) {
            push(loc.clone(), format!("voltage bounds must satisfy 0 < vmin < vmax, got [{}, {}]", b.vmin, b.vmax));
        }
        if !b.pl.is_finite() || !b.ql.is_finite() {
            push(loc, "load must be finite".into());
        }
    }
    let refs = case.buses.iter().filter(|b| b.angle_reference).count();
    if refs != 1 {
        push("buses".into(), format!("exactly one angle reference bus required, found {refs}"));
    }

    let index: HashMap<usize, usize> = case.buses.iter().enumerate().map(|(k, b)| (b.id, k)).collect();

    for (k, l) in case.lines.iter().enumerate() {
        let loc = format!("line {k} ({}-{})", l.from, l.to);
        if l.from == l.to {
            push(loc.clone(), "from_bus equals to_bus".into());
        }
        for end in [l.from, l.to] {
            if !index.contains_key(&end) {
                push(loc.clone(), format!("references unknown bus {end}"));
            }
        }
        if !(l.imax > 0.0) {
            push(loc.clone(), format!("imax must be positive, got {}", l.imax));
        }
        let y: Complex64 = l.series_admittance.into();
        if y.norm() == 0.0 || !y.is_finite() {
            push(loc, "series admittance must be finite and nonzero".into());
        }
    }

    let mut gen_buses = HashSet::new();
    for (k, g) in case.generators.iter().enumerate() {
        let loc = format!("generator {k} (bus {})", g.bus);
        match index.get(&g.bus) {
            None => push(loc.clone(), format!("references unknown bus {}", g.bus)),
            Some(&b) if case.buses[b].kind != BusKind::Generator => {
                push(loc.clone(), format!("bus {} is not of kind generator", g.bus))
            }
            _ => {}
        }
        if !gen_buses.insert(g.bus) {
            push(loc.clone(), format!("more than one generator at bus {}", g.bus));
        }
        let lim = &g.limits;
        if lim.pmin > lim.pmax {
            push(loc.clone(), format!("pmin {} exceeds pmax {}", lim.pmin, lim.pmax));
        }
        if lim.qmin > lim.qmax {
            push(loc.clone(), format!("qmin {} exceeds qmax {}", lim.qmin, lim.qmax));
        }
        if g.cost.a2 < 0.0 {
            push(loc.clone(), format!("cost coefficient a2 must be nonnegative, got {}", g.cost.a2));
        }
        let m = &g.machine;
        if !(m.m > 0.0) {
            push(loc.clone(), "inertia M must be positive".into());
        }
        if !(m.td0p > 0.0 && m.tq0p > 0.0) {
            push(loc.clone(), "open-circuit time constants must be positive".into());
        }
        if !(m.xdp > 0.0 && m.xd >= m.xdp) {
            push(loc.clone(), format!("transient reactance ordering requires xd >= xdp > 0 (xd = {}, xdp = {})", m.xd, m.xdp));
        }
        if !(m.xqp > 0.0 && m.xq >= m.xqp) {
            push(loc.clone(), format!("transient reactance ordering requires xq >= xqp > 0 (xq = {}, xqp = {})", m.xq, m.xqp));
        }
        if !(m.omega_s > 0.0) {
            push(loc.clone(), "omega_s must be positive".into());
        }
        let e = &g.exciter;
        if !(e.te > 0.0 && e.ta > 0.0 && e.tf > 0.0) {
            push(loc.clone(), "exciter time constants te, ta, tf must be positive".into());
        }
        if !(e.ka > 0.0) {
            push(loc.clone(), "exciter gain ka must be positive".into());
        }
        if e.ae < 0.0 || e.be < 0.0 {
            push(loc, "saturation coefficients ae, be must be nonnegative".into());
        }
    }
    for b in &case.buses {
        if b.kind == BusKind::Generator && !gen_buses.contains(&b.id) {
            push(format!("bus {}", b.id), "generator bus without a generator".into());
        }
    }

    // Connectivity over valid lines.
    if !case.buses.is_empty() && seen.len() == case.buses.len() {
        let n = case.buses.len();
        let mut adj = vec![Vec::new(); n];
        for l in &case.lines {
            if let (Some(&a), Some(&b)) = (index.get(&l.from), index.get(&l.to)) {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        let mut visited = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        visited[0] = true;
        while let Some(a) = queue.pop_front() {
            for &b in &adj[a] {
                if !visited[b] {
                    visited[b] = true;
                    queue.push_back(b);
                }
            }
        }
        for (k, v) in visited.iter().enumerate() {
            if !v {
                push(format!("bus {}", case.buses[k].id), "bus is not connected to the network".into());
            }
        }
    }
    out
}

/// Dense bus admittance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Admittance {
    pub y: DMatrix<Complex64>,
}

impl Admittance {
    pub fn magnitude(&self, i: usize, j: usize) -> f64 {
        self.y[(i, j)].norm()
    }

    pub fn angle(&self, i: usize, j: usize) -> f64 {
        self.y[(i, j)].arg()
    }

    pub fn conductance(&self) -> DMatrix<f64> {
        self.y.map(|c| c.re)
    }

    pub fn susceptance(&self) -> DMatrix<f64> {
        self.y.map(|c| c.im)
    }
}

pub fn build_admittance(case: &NetworkCase) -> Admittance {
    let n = case.num_buses();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for (l, (i, j)) in case.lines.iter().zip(case.line_ends()) {
        let ys: Complex64 = l.series_admittance.into();
        let ysh: Complex64 = l.shunt_admittance_half.into();
        y[(i, i)] += ys + ysh;
        y[(j, j)] += ys + ysh;
        y[(i, j)] -= ys;
        y[(j, i)] -= ys;
    }
    Admittance { y }
}

/// From-bus current phasor of a π-model line.
pub fn line_current(line: &LineRecord, vi: Complex64, vj: Complex64) -> Complex64 {
    let ys: Complex64 = line.series_admittance.into();
    let ysh: Complex64 = line.shunt_admittance_half.into();
    ys * (vi - vj) + ysh * vi
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_cases_are_valid() {
        for name in bundled_case_names() {
            let case = bundled_case(name).unwrap();
            assert!(validate_case(&case).is_empty(), "{name}");
        }
    }
}
