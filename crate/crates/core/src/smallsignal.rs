//! Linearization, the reduced state matrix `A = Ã − B̃ D̃⁻¹ C̃`, modal
//! analysis and first-order eigenvalue sensitivities.

use nalgebra::{DMatrix, DVector, LU};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dae::{ContractionSink, DaeModel};

#[derive(Debug, Clone, thiserror::Error)]
pub enum SmallSignalError {
    #[error("algebraic Jacobian D is singular")]
    Singular,
    #[error("algebraic Jacobian D is ill-conditioned (1-norm condition estimate {cond:.3e})")]
    IllConditioned { cond: f64 },
    #[error("no non-zero eigenvalue left after filtering zero modes")]
    NoDominantMode,
    #[error("eigenvector computation failed: {0}")]
    Eigenvector(String),
    #[error("left/right eigenvector product {product:.3e} is too small (defective eigenvalue)")]
    Defective { product: f64 },
    #[error("non-finite entries in the linearization")]
    NonFinite,
}

/// Largest tolerated 1-norm condition estimate of `D̃`.
pub const MAX_CONDITION: f64 = 1e12;

/// The partitioned DAE Jacobian `[[Ã, B̃], [C̃, D̃]]` and the input matrix
/// `E₁ = ∂f/∂[T_M, V_ref]`.
#[derive(Debug, Clone)]
pub struct LinearizedBlocks {
    pub num_generators: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub e1: DMatrix<f64>,
}

impl LinearizedBlocks {
    fn g2(&self) -> usize {
        2 * self.num_generators
    }
    fn g4(&self) -> usize {
        4 * self.num_generators
    }

    /// `∂f/∂I_g`.
    pub fn b1(&self) -> DMatrix<f64> {
        self.b.columns(0, self.g2()).into_owned()
    }
    /// `∂f/∂V_g`.
    pub fn b2(&self) -> DMatrix<f64> {
        self.b.columns(self.g2(), self.g2()).into_owned()
    }
    /// Stator rows of `C̃`.
    pub fn c1(&self) -> DMatrix<f64> {
        self.c.rows(0, self.g2()).into_owned()
    }
    /// Generator-bus network rows of `C̃`.
    pub fn c2(&self) -> DMatrix<f64> {
        self.c.rows(self.g2(), self.g2()).into_owned()
    }
    pub fn d1(&self) -> DMatrix<f64> {
        self.d.view((0, 0), (self.g2(), self.g2())).into_owned()
    }
    pub fn d2(&self) -> DMatrix<f64> {
        self.d.view((0, self.g2()), (self.g2(), self.g2())).into_owned()
    }
    pub fn d3(&self) -> DMatrix<f64> {
        self.d.view((self.g2(), 0), (self.g2(), self.g2())).into_owned()
    }
    pub fn d4(&self) -> DMatrix<f64> {
        self.d.view((self.g2(), self.g2()), (self.g2(), self.g2())).into_owned()
    }
    pub fn d5(&self) -> DMatrix<f64> {
        let n = self.d.ncols() - self.g4();
        self.d.view((self.g2(), self.g4()), (self.g2(), n)).into_owned()
    }
    pub fn d6(&self) -> DMatrix<f64> {
        let n = self.d.nrows() - self.g4();
        self.d.view((self.g4(), self.g2()), (n, self.g2())).into_owned()
    }
    pub fn d7(&self) -> DMatrix<f64> {
        let n = self.d.nrows() - self.g4();
        self.d.view((self.g4(), self.g4()), (n, n)).into_owned()
    }
}

/// Linearizes the DAE at `z` (the Jacobian does not depend on `T_M`, `V_ref`).
pub fn linearize_blocks(model: &DaeModel, z: &[f64]) -> LinearizedBlocks {
    let g = model.num_generators();
    let zeros = vec![0.0; g];
    let (_, j) = model.residual_and_jacobian(z, &zeros, &zeros);
    let ns = model.layout.num_states();
    let na = model.layout.num_algebraic();
    let mut e1 = DMatrix::zeros(ns, 2 * g);
    for (k, gen) in model.case.generators.iter().enumerate() {
        e1[(model.layout.state(k, crate::dae::state::OMEGA), k)] = 1.0 / gen.machine.m;
        e1[(model.layout.state(k, crate::dae::state::VR), g + k)] = gen.exciter.ka / gen.exciter.ta;
    }
    LinearizedBlocks {
        num_generators: g,
        a: j.view((0, 0), (ns, ns)).into_owned(),
        b: j.view((0, ns), (ns, na)).into_owned(),
        c: j.view((ns, 0), (na, ns)).into_owned(),
        d: j.view((ns, ns), (na, na)).into_owned(),
        e1,
    }
}

/// The reduced state matrix together with the factorizations used to form it.
#[derive(Debug, Clone)]
pub struct StateMatrix {
    pub a: DMatrix<f64>,
    pub blocks: LinearizedBlocks,
    pub condition_estimate: f64,
    lu_d: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    lu_dt: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl StateMatrix {
    /// `D̃⁻¹ x` for a complex vector.
    pub fn solve_d(&self, x: &DVector<Complex64>) -> DVector<Complex64> {
        complex_solve(&self.lu_d, x)
    }

    /// `D̃⁻ᵀ x` for a complex vector.
    pub fn solve_dt(&self, x: &DVector<Complex64>) -> DVector<Complex64> {
        complex_solve(&self.lu_dt, x)
    }
}

fn complex_solve(lu: &LU<f64, nalgebra::Dyn, nalgebra::Dyn>, x: &DVector<Complex64>) -> DVector<Complex64> {
    let re = lu.solve(&x.map(|c| c.re)).expect("factor checked for singularity");
    let im = lu.solve(&x.map(|c| c.im)).expect("factor checked for singularity");
    DVector::from_fn(x.len(), |i, _| Complex64::new(re[i], im[i]))
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Hager's estimate of `‖D⁻¹‖₁` from the factors of `D` and `Dᵀ`.
fn inverse_one_norm_estimate(
    lu: &LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    lu_t: &LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    n: usize,
) -> f64 {
    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut est = 0.0;
    for _ in 0..5 {
        let Some(y) = lu.solve(&x) else { return f64::INFINITY };
        est = y.iter().map(|v| v.abs()).sum::<f64>();
        let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let Some(z) = lu_t.solve(&xi) else { return f64::INFINITY };
        let (j, zmax) = z.iter().enumerate().fold((0, 0.0f64), |acc, (i, v)| {
            if v.abs() > acc.1 {
                (i, v.abs())
            } else {
                acc
            }
        });
        if zmax <= z.dot(&x) {
            break;
        }
        x = DVector::zeros(n);
        x[j] = 1.0;
    }
    est
}

/// Eliminates the algebraic variables: `A = Ã − B̃ D̃⁻¹ C̃`.
pub fn reduce_state_matrix(blocks: LinearizedBlocks) -> Result<StateMatrix, SmallSignalError> {
    if !blocks.d.iter().chain(blocks.a.iter()).chain(blocks.b.iter()).chain(blocks.c.iter()).all(|v| v.is_finite())
    {
        return Err(SmallSignalError::NonFinite);
    }
    let n = blocks.d.nrows();
    let lu_d = blocks.d.clone().lu();
    let lu_dt = blocks.d.transpose().lu();
    let Some(dinv_c) = lu_d.solve(&blocks.c) else {
        return Err(SmallSignalError::Singular);
    };
    let cond = one_norm(&blocks.d) * inverse_one_norm_estimate(&lu_d, &lu_dt, n);
    if !cond.is_finite() {
        return Err(SmallSignalError::Singular);
    }
    if cond > MAX_CONDITION {
        return Err(SmallSignalError::IllConditioned { cond });
    }
    let a = &blocks.a - &blocks.b * dinv_c;
    Ok(StateMatrix {
        a,
        blocks,
        condition_estimate: cond,
        lu_d,
        lu_dt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalOptions {
    /// Eigenvalues with `|λ| ≤ zero_mode_tol` are treated as structural zeros.
    pub zero_mode_tol: f64,
    /// Gap to the second-rightmost real part below which a warning is raised.
    pub degeneracy_tol: f64,
    /// Real parts closer than this are considered tied.
    pub tie_tol: f64,
}

impl Default for ModalOptions {
    fn default() -> Self {
        Self {
            zero_mode_tol: 1e-6,
            degeneracy_tol: 1e-8,
            tie_tol: 1e-12,
        }
    }
}

/// Serializable view of one eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub re: f64,
    pub im: f64,
}

impl From<Complex64> for ModeSummary {
    fn from(c: Complex64) -> Self {
        Self { re: c.re, im: c.im }
    }
}

/// The dominant (rightmost non-zero) mode and the full spectrum.
#[derive(Debug, Clone)]
pub struct ModalResult {
    /// Spectral abscissa over the non-zero modes.
    pub eta: f64,
    pub lambda: Complex64,
    /// Right eigenvector, unit 2-norm.
    pub phi: DVector<Complex64>,
    /// Left eigenvector (row), scaled so that `ψφ = 1`.
    pub psi: DVector<Complex64>,
    /// All eigenvalues sorted by decreasing real part.
    pub eigenvalues: Vec<Complex64>,
    /// Eigenvalues excluded by the zero-mode filter.
    pub zero_filtered: Vec<Complex64>,
    /// Distance from `η` to the next distinct real part.
    pub margin: f64,
    pub warnings: Vec<String>,
}

/// JSON view of a [`ModalResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalReport {
    pub eta: f64,
    pub lambda_eta: ModeSummary,
    pub psi_eta: Vec<ModeSummary>,
    pub phi_eta: Vec<ModeSummary>,
    pub eigenvalues: Vec<ModeSummary>,
    pub zero_filtered: Vec<ModeSummary>,
    pub margin: f64,
    pub warnings: Vec<String>,
}

impl From<&ModalResult> for ModalReport {
    fn from(m: &ModalResult) -> Self {
        let conv = |v: &[Complex64]| v.iter().map(|&c| c.into()).collect();
        Self {
            eta: m.eta,
            lambda_eta: m.lambda.into(),
            psi_eta: conv(m.psi.as_slice()),
            phi_eta: conv(m.phi.as_slice()),
            eigenvalues: conv(&m.eigenvalues),
            zero_filtered: conv(&m.zero_filtered),
            margin: m.margin,
            warnings: m.warnings.clone(),
        }
    }
}

impl ModalResult {
    /// The `count` rightmost non-zero eigenvalues.
    pub fn leading_modes(&self, count: usize, zero_tol: f64) -> Vec<ModeSummary> {
        self.eigenvalues
            .iter()
            .filter(|l| l.norm() > zero_tol)
            .take(count)
            .map(|&l| l.into())
            .collect()
    }
}

/// Solves `(M − μI) x = b` repeatedly (inverse iteration).
fn inverse_iteration(m: &DMatrix<Complex64>, lambda: Complex64) -> Result<DVector<Complex64>, SmallSignalError> {
    let n = m.nrows();
    let scale = 1.0 + lambda.norm();
    for attempt in 0..4 {
        let eps = scale * 1e-12 * 10f64.powi(2 * attempt);
        let mu = lambda + Complex64::new(eps, eps);
        let mut shifted = m.clone();
        for i in 0..n {
            shifted[(i, i)] -= mu;
        }
        let lu = shifted.lu();
        let mut x = DVector::from_fn(n, |i, _| Complex64::new(1.0 + 0.1 * i as f64 / n as f64, 0.01 * i as f64));
        let mut ok = true;
        for _ in 0..3 {
            match lu.solve(&x) {
                Some(y) if y.iter().all(|c| c.re.is_finite() && c.im.is_finite()) => {
                    let nrm = y.norm();
                    if nrm == 0.0 {
                        ok = false;
                        break;
                    }
                    x = y.unscale(nrm);
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok(x);
        }
    }
    Err(SmallSignalError::Eigenvector(format!("inverse iteration failed at λ = {lambda}")))
}

/// Eigenvalues of `A`, the dominant non-zero mode and its eigenvectors.
pub fn modal_analysis(a: &DMatrix<f64>, opts: &ModalOptions) -> Result<ModalResult, SmallSignalError> {
    if !a.iter().all(|v| v.is_finite()) {
        return Err(SmallSignalError::NonFinite);
    }
    let mut eig: Vec<Complex64> = a.clone().complex_eigenvalues().iter().copied().collect();
    eig.sort_by(|x, y| y.re.total_cmp(&x.re).then(x.im.abs().total_cmp(&y.im.abs())));
    let (nonzero, zero_filtered): (Vec<Complex64>, Vec<Complex64>) =
        eig.iter().partition(|l| l.norm() > opts.zero_mode_tol);
    let Some(top) = nonzero.first() else {
        return Err(SmallSignalError::NoDominantMode);
    };
    let eta = top.re;
    let lambda = nonzero
        .iter()
        .copied()
        .filter(|l| (l.re - eta).abs() <= opts.tie_tol)
        .min_by(|x, y| x.im.abs().total_cmp(&y.im.abs()).then(y.im.total_cmp(&x.im)))
        .unwrap_or(*top);
    // A conjugate pair is a single entry here; genuine ties are distinct real parts.
    let margin = nonzero
        .iter()
        .filter(|l| (l.re - eta).abs() > opts.tie_tol || (l.im.abs() - lambda.im.abs()).abs() > opts.tie_tol)
        .map(|l| eta - l.re)
        .fold(f64::INFINITY, f64::min);

    let ac = a.map(|v| Complex64::new(v, 0.0));
    let phi = inverse_iteration(&ac, lambda)?;
    let psi_col = inverse_iteration(&ac.transpose(), lambda)?;
    let product = psi_col.iter().zip(phi.iter()).map(|(p, f)| p * f).sum::<Complex64>();
    if product.norm() < 1e-10 {
        return Err(SmallSignalError::Defective {
            product: product.norm(),
        });
    }
    let psi = psi_col.map(|p| p / product);

    let a_norm = a.norm().max(1.0);
    let res_r = (&ac * &phi - phi.map(|v| v * lambda)).norm();
    let res_l = (ac.transpose() * &psi - psi.map(|v| v * lambda)).norm() / psi.norm();
    if res_r > 1e-8 * a_norm || res_l > 1e-8 * a_norm {
        return Err(SmallSignalError::Eigenvector(format!(
            "residuals {res_r:.3e} / {res_l:.3e} exceed 1e-8·‖A‖ at λ = {lambda}"
        )));
    }

    let mut warnings = Vec::new();
    if margin < opts.degeneracy_tol {
        warnings.push(format!(
            "dominant eigenvalue not isolated: gap {margin:.3e} below {:.1e}",
            opts.degeneracy_tol
        ));
    }
    Ok(ModalResult {
        eta,
        lambda,
        phi,
        psi,
        eigenvalues: eig,
        zero_filtered,
        margin,
        warnings,
    })
}

/// `dλ = ψ dA φ / ψφ` for a perturbation `dA` of the state matrix.
pub fn eigenvalue_derivative(modal: &ModalResult, da: &DMatrix<f64>) -> Complex64 {
    let dac = da.map(|v| Complex64::new(v, 0.0));
    let num = modal.psi.transpose() * dac * &modal.phi;
    let den = modal.psi.transpose() * &modal.phi;
    num[(0, 0)] / den[(0, 0)]
}

/// Linearization, reduction and modal analysis in one call.
pub fn analyze_point(model: &DaeModel, z: &[f64], opts: &ModalOptions) -> Result<(StateMatrix, ModalResult), SmallSignalError> {
    let sm = reduce_state_matrix(linearize_blocks(model, z))?;
    let modal = modal_analysis(&sm.a, opts)?;
    Ok((sm, modal))
}

/// `∂η/∂z` with respect to every DAE variable, computed from the second
/// derivatives of the residual contracted with the extended eigenvectors.
pub fn spectral_abscissa_gradient(model: &DaeModel, z: &[f64], sm: &StateMatrix, modal: &ModalResult) -> Vec<f64> {
    let lambda_grad = eigenvalue_gradient(model, z, sm, modal);
    lambda_grad.iter().map(|c| c.re).collect()
}

/// `∂λ/∂z` of the dominant eigenvalue.
pub fn eigenvalue_gradient(model: &DaeModel, z: &[f64], sm: &StateMatrix, modal: &ModalResult) -> Vec<Complex64> {
    let ns = model.layout.num_states();
    let n = model.layout.len();
    let bc = sm.blocks.b.map(|v| Complex64::new(v, 0.0));
    let cc = sm.blocks.c.map(|v| Complex64::new(v, 0.0));
    // w = D̃⁻¹ C̃ φ,   uᵀ = D̃⁻ᵀ B̃ᵀ ψᵀ
    let w = sm.solve_d(&(&cc * &modal.phi));
    let u = sm.solve_dt(&(bc.transpose() * &modal.psi));
    let mut left = vec![Complex64::new(0.0, 0.0); n];
    let mut right = vec![Complex64::new(0.0, 0.0); n];
    for i in 0..ns {
        left[i] = modal.psi[i];
        right[i] = modal.phi[i];
    }
    for i in 0..n - ns {
        left[ns + i] = -u[i];
        right[ns + i] = -w[i];
    }
    let g = model.num_generators();
    let zeros = vec![0.0; g];
    let mut sink = ContractionSink {
        left: &left,
        right: &right,
        grad: vec![Complex64::new(0.0, 0.0); n],
    };
    model.stamp(z, &zeros, &zeros, &mut sink);
    let den = modal.psi.iter().zip(modal.phi.iter()).map(|(p, f)| p * f).sum::<Complex64>();
    sink.grad.into_iter().map(|v| v / den).collect()
}

/// Central-difference `∂η/∂z_i` for the listed DAE coordinates.
pub fn finite_difference_gradient(
    model: &DaeModel,
    z: &[f64],
    indices: &[usize],
    step: f64,
    opts: &ModalOptions,
) -> Result<Vec<f64>, SmallSignalError> {
    let mut out = Vec::with_capacity(indices.len());
    let mut zp = z.to_vec();
    for &i in indices {
        let h = step * (1.0 + z[i].abs());
        zp[i] = z[i] + h;
        let up = analyze_point(model, &zp, opts)?.1.eta;
        zp[i] = z[i] - h;
        let dn = analyze_point(model, &zp, opts)?.1.eta;
        zp[i] = z[i];
        out.push((up - dn) / (2.0 * h));
    }
    Ok(out)
}
