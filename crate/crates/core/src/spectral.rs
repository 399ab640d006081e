//! Spectral calculus of the discrete local operator: eigenpairs orthonormal
//! in the mass pairing, matrix functions, fractional powers with their
//! extracted nonlocal kernel, the heat kernel and the heat-kernel quadrature
//! for the fractional kernel.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::assembly::{mat_vec, relative_asymmetry, DiscreteEllipticOperator};
use crate::error::{Error, Result};
use crate::special::{gamma, neg_gamma_abs, upper_incomplete_gamma_neg};

/// Eigenpairs of `L_mat` with eigenvectors orthonormal in `⟨u,v⟩_M = Σ m_i u_i v_i`.
#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    eigenvalues: DVector<f64>,
    vectors: DMatrix<f64>,
    masses: Vec<f64>,
}

impl SpectralDecomposition {
    /// Ascending eigenvalues, nonnegative.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Eigenvectors as columns.
    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues[self.len() - 1]
    }

    /// Smallest strictly positive eigenvalue.
    pub fn smallest_positive(&self) -> Option<f64> {
        self.eigenvalues.iter().copied().find(|&l| l > 0.0)
    }

    /// Coefficients `V^T M v` of `v` in the eigenbasis.
    pub fn coefficients(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.len());
        let weighted: Vec<f64> = v.iter().zip(&self.masses).map(|(a, m)| a * m).collect();
        let n = self.len();
        (0..n)
            .map(|k| self.vectors.column(k).iter().zip(&weighted).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `Σ_k c_k v_k`.
    pub fn synthesize(&self, coefficients: &[f64]) -> Vec<f64> {
        mat_vec(&self.vectors, coefficients)
    }

    /// `V · diag(f(λ)) · Vᵀ`, the kernel of `f(L)` against the mass pairing.
    pub fn kernel_matrix(&self, values: &[f64]) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (k, &f) in values.iter().enumerate() {
            scaled.column_mut(k).scale_mut(f);
        }
        let mut out = &scaled * self.vectors.transpose();
        symmetrize(&mut out);
        out
    }

    /// `V · diag(f(λ)) · Vᵀ M`, the matrix of `f(L)` acting on nodal values.
    pub fn function_matrix(&self, values: &[f64]) -> DMatrix<f64> {
        let mut out = self.kernel_matrix(values);
        for (j, &m) in self.masses.iter().enumerate() {
            out.column_mut(j).scale_mut(m);
        }
        out
    }

    /// Relative Frobenius reconstruction error of `op` from the eigenpairs.
    pub fn reconstruction_error(&self, op: &DiscreteEllipticOperator) -> f64 {
        let lam: Vec<f64> = self.eigenvalues.iter().copied().collect();
        (self.function_matrix(&lam) - op.matrix()).norm() / op.matrix().norm()
    }

    /// Largest deviation of `VᵀMV` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut mv = self.vectors.clone();
        for (i, &m) in self.masses.iter().enumerate() {
            mv.row_mut(i).scale_mut(m);
        }
        let gram = self.vectors.transpose() * mv;
        let n = self.len();
        (gram - DMatrix::<f64>::identity(n, n)).abs().max()
    }
}

fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Eigendecomposes `M^{1/2} L M^{-1/2}` (symmetric) and maps eigenvectors
/// back. Eigenvalues within `1e-10·max(1, λ_max)` of zero are clamped to zero.
pub fn eigendecompose(op: &DiscreteEllipticOperator) -> Result<SpectralDecomposition> {
    let masses = op.masses().to_vec();
    let n = masses.len();
    let root: Vec<f64> = masses.iter().map(|m| m.sqrt()).collect();
    let mut b = op.stiffness().clone();
    for j in 0..n {
        for i in 0..n {
            b[(i, j)] /= root[i] * root[j];
        }
    }
    let asym = relative_asymmetry(&b);
    if asym > 1e-8 {
        return Err(Error::Asymmetric(asym));
    }
    symmetrize(&mut b);
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[c]).then(a.cmp(&c)));
    let lmax = eig.eigenvalues.max();
    let tol = 1e-10 * lmax.max(1.0);
    let mut eigenvalues = DVector::<f64>::zeros(n);
    let mut vectors = DMatrix::<f64>::zeros(n, n);
    for (k, &src) in order.iter().enumerate() {
        let mut lam = eig.eigenvalues[src];
        if lam < -tol {
            return Err(Error::InvalidParameter(format!("operator has negative eigenvalue {lam:e}")));
        }
        if lam.abs() <= tol {
            lam = 0.0;
        }
        eigenvalues[k] = lam;
        let col = eig.eigenvectors.column(src);
        // fixed sign: largest-magnitude entry positive
        let mut pivot = 0;
        for i in 0..n {
            if col[i].abs() > col[pivot].abs() + 1e-12 {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[(i, k)] = sign * col[i] / root[i];
        }
    }
    Ok(SpectralDecomposition { eigenvalues, vectors, masses })
}

/// Applies `φ(L)` to `v`.
pub fn apply_spectral_function<F>(decomp: &SpectralDecomposition, phi: F, v: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(f64) -> f64,
{
    let values = spectral_values(decomp, phi)?;
    let c = decomp.coefficients(v);
    let scaled: Vec<f64> = c.iter().zip(&values).map(|(a, b)| a * b).collect();
    Ok(decomp.synthesize(&scaled))
}

fn spectral_values<F: Fn(f64) -> f64>(decomp: &SpectralDecomposition, phi: F) -> Result<Vec<f64>> {
    decomp
        .eigenvalues
        .iter()
        .map(|&l| {
            let v = phi(l);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFiniteSpectralFunction(l))
            }
        })
        .collect()
}

/// `L^s` as a dense matrix together with its extracted jump kernel.
#[derive(Clone, Debug)]
pub struct FractionalOperator {
    s: f64,
    matrix: DMatrix<f64>,
    weighted: DMatrix<f64>,
    kernel: DMatrix<f64>,
    masses: Vec<f64>,
}

impl FractionalOperator {
    pub fn s(&self) -> f64 {
        self.s
    }

    /// `S = V diag(λ^s) VᵀM`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `M·S`, exactly symmetric.
    pub fn weighted(&self) -> &DMatrix<f64> {
        &self.weighted
    }

    /// `K̂_ij = -(MS)_ij / (m_i m_j)` off the diagonal, zero on it.
    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        mat_vec(&self.matrix, v)
    }

    /// `⟨S f, g⟩_M`.
    pub fn pairing(&self, f: &[f64], g: &[f64]) -> f64 {
        mat_vec(&self.weighted, f).iter().zip(g).map(|(a, b)| a * b).sum()
    }

    /// `½ Σ_{i≠j} (f_i-f_j)(g_i-g_j) K̂_ij m_i m_j`.
    pub fn dirichlet_form(&self, f: &[f64], g: &[f64]) -> f64 {
        let n = self.len();
        let mut total = 0.0;
        for j in 0..n {
            for i in 0..n {
                if i != j {
                    total += (f[i] - f[j]) * (g[i] - g[j]) * self.kernel[(i, j)] * self.masses[i] * self.masses[j];
                }
            }
        }
        0.5 * total
    }
}

/// Builds `L^s` for `s ∈ (0, 1]`.
pub fn fractional_power(decomp: &SpectralDecomposition, s: f64) -> Result<FractionalOperator> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::InvalidParameter(format!("fractional exponent must lie in (0,1], got {s}")));
    }
    let values: Vec<f64> = decomp.eigenvalues.iter().map(|&l| if l == 0.0 { 0.0 } else { l.powf(s) }).collect();
    let masses = decomp.masses.clone();
    let n = masses.len();
    let mut weighted = decomp.kernel_matrix(&values);
    for j in 0..n {
        for i in 0..n {
            weighted[(i, j)] *= masses[i] * masses[j];
        }
    }
    let mut matrix = weighted.clone();
    for i in 0..n {
        matrix.row_mut(i).scale_mut(1.0 / masses[i]);
    }
    let mut kernel = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            if i != j {
                kernel[(i, j)] = -weighted[(i, j)] / (masses[i] * masses[j]);
            }
        }
    }
    Ok(FractionalOperator { s, matrix, weighted, kernel, masses })
}

/// Heat kernel `p_t(i,j) = Σ_k e^{-tλ_k} v_k(i) v_k(j)`, so that
/// `(e^{-tL} f)_i = Σ_j p_t(i,j) f_j m_j`.
pub fn heat_kernel(decomp: &SpectralDecomposition, t: f64) -> Result<DMatrix<f64>> {
    if !(t >= 0.0) {
        return Err(Error::InvalidParameter(format!("heat time must be nonnegative, got {t}")));
    }
    let values: Vec<f64> = decomp.eigenvalues.iter().map(|&l| (-t * l).exp()).collect();
    Ok(decomp.kernel_matrix(&values))
}

/// Log-spaced time grid for trapezoid quadrature in `ln t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureSpec {
    pub t_min: f64,
    pub t_max: f64,
    pub nodes: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec { t_min: 1e-6, t_max: 1e6, nodes: 400 }
    }
}

impl QuadratureSpec {
    fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_max > self.t_min && self.nodes >= 2) {
            return Err(Error::InvalidParameter(format!("bad quadrature spec {self:?}")));
        }
        Ok(())
    }

    /// Nodes `t_k` and weights `w_k` with `∫ f dt ≈ Σ w_k f(t_k)`.
    pub fn nodes_and_weights(&self) -> (Vec<f64>, Vec<f64>) {
        let span = (self.t_max / self.t_min).ln();
        let du = span / (self.nodes - 1) as f64;
        let ts: Vec<f64> = (0..self.nodes).map(|k| self.t_min * (k as f64 * du).exp()).collect();
        let ws = ts
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let end = k == 0 || k == self.nodes - 1;
                du * t * if end { 0.5 } else { 1.0 }
            })
            .collect();
        (ts, ws)
    }
}

/// `∫_0^τ (e^{-tλ} - 1) t^{-1-s} dt` by its power series.
fn head_integral(lambda: f64, tau: f64, s: f64) -> f64 {
    let x = lambda * tau;
    let mut term = 1.0;
    let mut sum = 0.0;
    for m in 1..200 {
        term *= -x / m as f64;
        let add = term / (m as f64 - s);
        sum += add;
        if add.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    sum * tau.powf(-s)
}

/// `∫_T^∞ e^{-tλ} t^{-1-s} dt`.
fn tail_integral(lambda: f64, t_max: f64, s: f64) -> f64 {
    if lambda == 0.0 {
        t_max.powf(-s) / s
    } else {
        lambda.powf(s) * upper_incomplete_gamma_neg(s, lambda * t_max)
    }
}

/// Fractional kernel from the heat kernel,
/// `K̃_ij = |Γ(-s)|⁻¹ ∫_0^∞ p_t(i,j) t^{-1-s} dt` for `i ≠ j`, by log-trapezoid
/// quadrature on `[t_min, t_max]` plus analytic head and tail pieces.
///
/// The integral converges without subtracting the constant mode: off the
/// diagonal `p_t → 0` as `t → 0` and the tail is integrable for `s > 0`.
pub fn kernel_from_heat(decomp: &SpectralDecomposition, s: f64, quad: &QuadratureSpec) -> Result<DMatrix<f64>> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::InvalidParameter(format!("kernel exponent must lie in (0,1), got {s}")));
    }
    quad.validate()?;
    let lmax = decomp.max_eigenvalue();
    if lmax * quad.t_min > 1.0 {
        return Err(Error::QuadratureTail(format!(
            "t_min = {:e} does not resolve λ_max = {lmax:e}",
            quad.t_min
        )));
    }
    if let Some(lpos) = decomp.smallest_positive() {
        let left = (-lpos * quad.t_max).exp();
        if left > 0.01 {
            return Err(Error::QuadratureTail(format!(
                "slowest mode λ = {lpos:e} keeps e^(-λ t_max) = {left:e} beyond t_max"
            )));
        }
    }
    let n = decomp.len();
    let (ts, ws) = quad.nodes_and_weights();
    let mut acc = DMatrix::<f64>::zeros(n, n);
    for (&t, &w) in ts.iter().zip(&ws) {
        let p = heat_kernel(decomp, t)?;
        acc += p * (w * t.powf(-1.0 - s));
    }
    let corrections: Vec<f64> = decomp
        .eigenvalues
        .iter()
        .map(|&l| head_integral(l, quad.t_min, s) + tail_integral(l, quad.t_max, s))
        .collect();
    acc += decomp.kernel_matrix(&corrections);
    acc /= neg_gamma_abs(s);
    for i in 0..n {
        acc[(i, i)] = 0.0;
    }
    Ok(acc)
}

/// Extension constant `d_s = Γ(-s) / (4^s Γ(s))`, negative on `(0, 1)`.
pub fn extension_constant(s: f64) -> f64 {
    -neg_gamma_abs(s) / (4f64.powf(s) * gamma(s))
}
