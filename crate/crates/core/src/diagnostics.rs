//! Unique-continuation diagnostics: Almgren frequency profiles of reflected
//! extension fields, doubling ratios, the `μ/β` geometry and a quantitative
//! strong-uniqueness probe for the nonlocal operator.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::extension::ReflectedField;
use crate::grid::{CoefficientField, Grid};
use crate::spectral::FractionalOperator;

/// Scalar field on a tensor mesh in `(x, y)`, `x ∈ ℝⁿ`, with the extended
/// coefficient `Ã = diag(A, 1)` sampled per x-node.
#[derive(Clone, Debug)]
pub struct SampledField {
    s: f64,
    axes: Vec<Vec<f64>>,
    values: Vec<f64>,
    coefficient: Option<Vec<DMatrix<f64>>>,
}

impl SampledField {
    /// Samples `f(x, y)` on the tensor product of `x_axes` and `y`, with `Ã = I`.
    pub fn from_fn<F: Fn(&[f64]) -> f64>(x_axes: Vec<Vec<f64>>, y: Vec<f64>, s: f64, f: F) -> Result<Self> {
        let mut axes = x_axes;
        axes.push(y);
        check_axes(&axes)?;
        let shape: Vec<usize> = axes.iter().map(Vec::len).collect();
        let total: usize = shape.iter().product();
        let mut values = Vec::with_capacity(total);
        let mut z = vec![0.0; axes.len()];
        for p in 0..total {
            let mut rest = p;
            for (k, axis) in axes.iter().enumerate() {
                z[k] = axis[rest % shape[k]];
                rest /= shape[k];
            }
            values.push(f(&z));
        }
        Ok(SampledField { s, axes, values, coefficient: None })
    }

    /// Wraps an evenly reflected extension field on the spatial grid.
    pub fn from_reflected(grid: &Grid, coeff: Option<&CoefficientField>, field: &ReflectedField, s: f64) -> Result<Self> {
        if field.x_len != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), found: field.x_len });
        }
        let mut axes: Vec<Vec<f64>> = (0..grid.dim()).map(|_| grid.axis().to_vec()).collect();
        axes.push(field.y.clone());
        check_axes(&axes)?;
        let coefficient = coeff.map(|c| {
            (0..grid.len())
                .map(|i| {
                    let n1 = grid.dim() + 1;
                    DMatrix::from_row_slice(n1, n1, &c.extended(i))
                })
                .collect()
        });
        Ok(SampledField { s, axes, values: field.values.clone(), coefficient })
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn dim(&self) -> usize {
        self.axes.len()
    }

    fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }

    fn x_index(&self, mi: &[usize]) -> usize {
        let d = self.dim() - 1;
        let mut idx = 0;
        let mut stride = 1;
        for k in 0..d {
            idx += mi[k] * stride;
            stride *= self.axes[k].len();
        }
        idx
    }

    fn coefficient_at(&self, mi: &[usize]) -> DMatrix<f64> {
        match &self.coefficient {
            Some(c) => c[self.x_index(mi)].clone(),
            None => DMatrix::identity(self.dim(), self.dim()),
        }
    }
}

fn check_axes(axes: &[Vec<f64>]) -> Result<()> {
    if axes.len() < 2 || axes.len() > 3 {
        return Err(Error::InvalidParameter(format!("need 2 or 3 axes, got {}", axes.len())));
    }
    for a in axes {
        if a.len() < 2 || a.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidGrid("sampled-field axes must be strictly increasing".into()));
        }
    }
    Ok(())
}

/// `μ(z) = Ãz·z/|z|²` and `β(z) = Ãz/μ(z)` for a coefficient matrix at `z`.
pub fn mu_beta(a: &DMatrix<f64>, z: &[f64]) -> Result<(f64, Vec<f64>)> {
    let v = DVector::from_column_slice(z);
    let norm2 = v.norm_squared();
    if norm2 == 0.0 {
        return Err(Error::InvalidParameter("μ and β are undefined at z = 0".into()));
    }
    let az = a * &v;
    let mu = az.dot(&v) / norm2;
    Ok((mu, az.iter().map(|c| c / mu).collect()))
}

/// Centre `z₀ = (x₀, 0)` with the congruence `w = T(z - z₀)`,
/// `T = Ã(z₀)^{-1/2}`, that normalizes the coefficient to the identity at `z₀`.
#[derive(Clone, Debug)]
pub struct FrequencyGeometry {
    center: Vec<f64>,
    transform: DMatrix<f64>,
    volume_factor: f64,
    bound: f64,
}

impl FrequencyGeometry {
    /// `a0` is `Ã(z₀)`; `bound` the ellipticity `Λ̃` of the coefficient.
    pub fn new(center_x: &[f64], a0: &DMatrix<f64>, bound: f64) -> Result<Self> {
        let d = center_x.len() + 1;
        if a0.nrows() != d || a0.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, found: a0.nrows() });
        }
        let eig = SymmetricEigen::new(a0.clone());
        if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::NotElliptic { node: 0, eigenvalue: eig.eigenvalues.min() });
        }
        let inv_root = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
        let transform = &eig.eigenvectors * inv_root * eig.eigenvectors.transpose();
        // dw = det(T) dz
        let volume_factor = eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()).product();
        let mut center = center_x.to_vec();
        center.push(0.0);
        Ok(FrequencyGeometry { center, transform, volume_factor, bound })
    }

    /// Geometry for `Ã = I` at `(x₀, 0)`.
    pub fn identity(center_x: &[f64]) -> Self {
        let d = center_x.len() + 1;
        let mut center = center_x.to_vec();
        center.push(0.0);
        FrequencyGeometry { center, transform: DMatrix::identity(d, d), volume_factor: 1.0, bound: 1.0 }
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn transform(&self) -> &DMatrix<f64> {
        &self.transform
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Normalized coordinates of a mesh point.
    pub fn normalize(&self, z: &[f64]) -> DVector<f64> {
        let d = DVector::from_iterator(z.len(), z.iter().zip(&self.center).map(|(a, b)| a - b));
        &self.transform * d
    }

    /// Coefficient `T Ã T` in normalized coordinates.
    pub fn normalized_coefficient(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        &self.transform * a * &self.transform
    }

    /// `(μ, β)` at normalized point `w` for the coefficient `a` in original coordinates.
    pub fn mu_beta(&self, a: &DMatrix<f64>, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        mu_beta(&self.normalized_coefficient(a), w)
    }
}

/// `H`, `D` and `N = rD/H` on a set of radii, by shell binning and by a
/// smoothed kernel.
#[derive(Clone, Debug)]
pub struct FrequencyProfile {
    pub radii: Vec<f64>,
    pub h: Vec<f64>,
    pub d: Vec<f64>,
    pub n: Vec<f64>,
    pub h_smooth: Vec<f64>,
    pub d_smooth: Vec<f64>,
    pub shell_width: f64,
    /// Mesh cells whose centre falls in each shell.
    pub shell_cells: Vec<usize>,
}

impl FrequencyProfile {
    pub fn n_smooth(&self) -> Vec<f64> {
        self.radii
            .iter()
            .zip(self.h_smooth.iter().zip(&self.d_smooth))
            .map(|(r, (h, d))| r * d / h)
            .collect()
    }

    /// Largest relative disagreement between the two quadratures of `H` and `D`.
    pub fn quadrature_gap(&self) -> f64 {
        let mut gap = 0.0f64;
        for k in 0..self.radii.len() {
            gap = gap.max((self.h[k] - self.h_smooth[k]).abs() / self.h[k].abs().max(f64::MIN_POSITIVE));
            let dscale = self.d[k].abs().max(self.d_smooth[k].abs());
            if dscale > 0.0 {
                gap = gap.max((self.d[k] - self.d_smooth[k]).abs() / dscale);
            }
        }
        gap
    }
}

/// Quadrature controls for [`frequency_profile_with`].
#[derive(Clone, Copy, Debug)]
pub struct ProfileOptions {
    /// Shell width; defaults to the coarsest x-spacing.
    pub shell_width: Option<f64>,
    /// Subdivisions per cell and axis.
    pub refine: usize,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions { shell_width: None, refine: 4 }
    }
}

/// Fewest mesh cells a shell may contain.
pub const MIN_SHELL_CELLS: usize = 8;

pub fn frequency_profile(field: &SampledField, geometry: &FrequencyGeometry, radii: &[f64]) -> Result<FrequencyProfile> {
    frequency_profile_with(field, geometry, radii, ProfileOptions::default())
}

pub fn frequency_profile_with(
    field: &SampledField,
    geometry: &FrequencyGeometry,
    radii: &[f64],
    options: ProfileOptions,
) -> Result<FrequencyProfile> {
    let d = field.dim();
    if geometry.center.len() != d {
        return Err(Error::DimensionMismatch { expected: d, found: geometry.center.len() });
    }
    if radii.is_empty() || radii.windows(2).any(|w| !(w[1] > w[0])) || !(radii[0] > 0.0) {
        return Err(Error::InvalidParameter("radii must be positive and increasing".into()));
    }
    let width = options.shell_width.unwrap_or_else(|| {
        (0..d - 1)
            .flat_map(|k| field.axes[k].windows(2).map(|w| w[1] - w[0]))
            .fold(0.0, f64::max)
    });
    if radii[0] < 3.0 * width {
        return Err(Error::InsufficientResolution(format!(
            "radius {} is below three shell widths ({width})",
            radii[0]
        )));
    }
    let rmax = radii[radii.len() - 1] + width;
    // ball must fit in the mesh: extent along axis k is r·|row k of T⁻¹|
    let tinv = geometry
        .transform
        .clone()
        .try_inverse()
        .ok_or(Error::InvalidParameter("singular normalization".into()))?;
    for k in 0..d {
        let reach = rmax * tinv.row(k).norm();
        let axis = &field.axes[k];
        let c = geometry.center[k];
        if c - reach < axis[0] || c + reach > axis[axis.len() - 1] {
            return Err(Error::InsufficientResolution(format!(
                "ball of radius {rmax} leaves the mesh along axis {k}"
            )));
        }
    }

    let nr = radii.len();
    let mut h = vec![0.0; nr];
    let mut dd = vec![0.0; nr];
    let mut hs = vec![0.0; nr];
    let mut ds = vec![0.0; nr];
    let mut cells = vec![0usize; nr];
    let shape = field.shape();
    let q = options.refine.max(1);
    let a_exp = 1.0 - 2.0 * field.s;
    let ncell: usize = shape.iter().map(|n| n - 1).product();
    let mut mi = vec![0usize; d];
    let mut corner_vals = vec![0.0; 1 << d];
    let mut corner_coef: Vec<DMatrix<f64>> = Vec::with_capacity(1 << d);
    for cell in 0..ncell {
        let mut rest = cell;
        for k in 0..d {
            mi[k] = rest % (shape[k] - 1);
            rest /= shape[k] - 1;
        }
        let lo: Vec<f64> = (0..d).map(|k| field.axes[k][mi[k]]).collect();
        let hi: Vec<f64> = (0..d).map(|k| field.axes[k][mi[k] + 1]).collect();
        // skip cells entirely outside the largest ball
        let centre: Vec<f64> = (0..d).map(|k| 0.5 * (lo[k] + hi[k])).collect();
        let halfdiag = (0..d).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt() * 0.5;
        let wc = geometry.normalize(&centre);
        let tnorm = geometry.transform.norm();
        if wc.norm() - tnorm * halfdiag > rmax + width {
            continue;
        }
        let rho_c = wc.norm();
        for (k, r) in radii.iter().enumerate() {
            if (rho_c - r).abs() < 0.5 * width {
                cells[k] += 1;
            }
        }
        corner_coef.clear();
        for c in 0..(1 << d) {
            let mut idx = 0;
            let mut stride = 1;
            let mut cm = vec![0usize; d];
            for k in 0..d {
                cm[k] = mi[k] + ((c >> k) & 1);
                idx += cm[k] * stride;
                stride *= shape[k];
            }
            corner_vals[c] = field.values[idx];
            corner_coef.push(field.coefficient_at(&cm));
        }
        let sub = q.pow(d as u32);
        for sc in 0..sub {
            let mut r2 = sc;
            let mut xi = vec![0.0; d];
            let mut z = vec![0.0; d];
            let mut vol = 1.0;
            for k in 0..d {
                let t = r2 % q;
                r2 /= q;
                xi[k] = (t as f64 + 0.5) / q as f64;
                let a = lo[k] + (hi[k] - lo[k]) * t as f64 / q as f64;
                let b = lo[k] + (hi[k] - lo[k]) * (t + 1) as f64 / q as f64;
                z[k] = 0.5 * (a + b);
                vol *= if k == d - 1 { signed_power_integral(a, b, a_exp) } else { b - a };
            }
            // multilinear value, gradient and coefficient at the subcell centre
            let mut u = 0.0;
            let mut grad = DVector::<f64>::zeros(d);
            let mut coef = DMatrix::<f64>::zeros(d, d);
            for c in 0..(1 << d) {
                let mut wgt = 1.0;
                for k in 0..d {
                    wgt *= if (c >> k) & 1 == 1 { xi[k] } else { 1.0 - xi[k] };
                }
                u += wgt * corner_vals[c];
                coef += &corner_coef[c] * wgt;
                for g in 0..d {
                    let mut dw = 1.0 / (hi[g] - lo[g]);
                    if (c >> g) & 1 == 0 {
                        dw = -dw;
                    }
                    for k in 0..d {
                        if k != g {
                            dw *= if (c >> k) & 1 == 1 { xi[k] } else { 1.0 - xi[k] };
                        }
                    }
                    grad[g] += dw * corner_vals[c];
                }
            }
            let w = geometry.normalize(&z);
            let rho = w.norm();
            if rho >= rmax + width {
                continue;
            }
            let energy = (&coef * &grad).dot(&grad) * vol;
            let mu = if rho > 0.0 {
                let ah = geometry.normalized_coefficient(&coef);
                (&ah * &w).dot(&w) / (rho * rho)
            } else {
                1.0
            };
            let mass = mu * u * u * vol;
            for (k, &r) in radii.iter().enumerate() {
                let t = rho - r;
                if t.abs() < 0.5 * width {
                    h[k] += mass;
                }
                if rho < r {
                    dd[k] += energy;
                }
                if t.abs() < width {
                    let phi = (1.0 + (std::f64::consts::PI * t / width).cos()) / (2.0 * width);
                    hs[k] += mass * phi;
                }
                let psi = if t <= -width {
                    1.0
                } else if t >= width {
                    0.0
                } else {
                    0.5 * (1.0 - t / width - (std::f64::consts::PI * t / width).sin() / std::f64::consts::PI)
                };
                ds[k] += energy * psi;
            }
        }
    }
    for k in 0..nr {
        if cells[k] < MIN_SHELL_CELLS {
            return Err(Error::InsufficientResolution(format!(
                "shell at r = {} holds {} cells, need {MIN_SHELL_CELLS}",
                radii[k], cells[k]
            )));
        }
    }
    let vf = geometry.volume_factor;
    let h: Vec<f64> = h.iter().map(|v| v * vf / width).collect();
    let dd: Vec<f64> = dd.iter().map(|v| v * vf).collect();
    let hs: Vec<f64> = hs.iter().map(|v| v * vf).collect();
    let ds: Vec<f64> = ds.iter().map(|v| v * vf).collect();
    if h.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::VanishingField);
    }
    let n = radii.iter().zip(h.iter().zip(&dd)).map(|(r, (hv, dv))| r * dv / hv).collect();
    Ok(FrequencyProfile { radii: radii.to_vec(), h, d: dd, n, h_smooth: hs, d_smooth: ds, shell_width: width, shell_cells: cells })
}

fn signed_power_integral(a: f64, b: f64, p: f64) -> f64 {
    let f = |y: f64| y.signum() * y.abs().powf(p + 1.0) / (p + 1.0);
    f(b) - f(a)
}

/// Doubling ratios and the fitted monotonicity constant of a profile.
#[derive(Clone, Debug)]
pub struct DoublingReport {
    /// `(r, H(2r)/H(r))` for radii whose double lies in the sampled range.
    pub ratios: Vec<(f64, f64)>,
    pub max_ratio: f64,
    /// Smallest `C ≥ 0` with `r ↦ N(r) e^{C r}` nondecreasing on the samples.
    pub c_star: f64,
    pub cap: f64,
    pub violation: bool,
}

/// Requires at least 8 radii spanning a factor of 4; `H(2r)` is interpolated
/// log-linearly between samples.
pub fn doubling_check(profile: &FrequencyProfile, cap: Option<f64>) -> Result<DoublingReport> {
    let r = &profile.radii;
    if r.len() < 8 || r[r.len() - 1] < 4.0 * r[0] {
        return Err(Error::InsufficientResolution(format!(
            "doubling needs >= 8 radii spanning a factor 4, got {} over [{}, {}]",
            r.len(),
            r[0],
            r[r.len() - 1]
        )));
    }
    if profile.h.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::VanishingField);
    }
    let log_h = |x: f64| -> f64 {
        let k = r.partition_point(|&v| v <= x).clamp(1, r.len() - 1);
        let (r0, r1) = (r[k - 1].ln(), r[k].ln());
        let (h0, h1) = (profile.h[k - 1].ln(), profile.h[k].ln());
        h0 + (h1 - h0) * (x.ln() - r0) / (r1 - r0)
    };
    let rmax = r[r.len() - 1];
    let ratios: Vec<(f64, f64)> = r
        .iter()
        .enumerate()
        .filter(|(_, &x)| 2.0 * x <= rmax * (1.0 + 1e-12))
        .map(|(k, &x)| (x, (log_h(2.0 * x) - profile.h[k].ln()).exp()))
        .collect();
    let max_ratio = ratios.iter().map(|p| p.1).fold(0.0, f64::max);
    let mut c_star = 0.0f64;
    for k in 0..r.len() - 1 {
        let (a, b) = (profile.n[k], profile.n[k + 1]);
        if a <= 0.0 {
            continue;
        }
        let need = if b <= 0.0 { f64::INFINITY } else { (a / b).ln() / (r[k + 1] - r[k]) };
        c_star = c_star.max(need);
    }
    let cap = cap.unwrap_or(50.0 / rmax);
    Ok(DoublingReport { ratios, max_ratio, c_star, cap, violation: c_star > cap })
}

/// Result of the strong-uniqueness probe.
#[derive(Clone, Debug)]
pub struct SucpProbe {
    pub value: f64,
    pub minimizer: Vec<f64>,
}

/// `min_{‖u‖_M = 1} Σ_{i∈O} w_i (u_i² + (S u)_i²)`, the smallest eigenvalue of
/// the pencil `(P_O W P_O + Sᵀ W_O S, M)`, computed as a squared singular
/// value for accuracy. Weights default to the masses.
pub fn sucp_probe(frac: &FractionalOperator, region: &[usize], weights: Option<&[f64]>) -> Result<SucpProbe> {
    if region.is_empty() {
        return Err(Error::InvalidParameter("probe region must be nonempty".into()));
    }
    let m = frac.masses();
    let n = m.len();
    if let Some(&bad) = region.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidPartition(format!("node {bad} out of range")));
    }
    let w: Vec<f64> = match weights {
        Some(w) if w.len() == region.len() => w.to_vec(),
        Some(w) => return Err(Error::DimensionMismatch { expected: region.len(), found: w.len() }),
        None => region.iter().map(|&i| m[i]).collect(),
    };
    // rows of B u: √w_i u_i and √w_i (S u)_i in the M-orthonormal variable
    // v = M^{1/2} u; the probe value is σ_min(B)², padded so that a nontrivial
    // null space shows up as a zero singular value
    let s = frac.matrix();
    let rows = (2 * region.len()).max(n);
    let mut b = DMatrix::<f64>::zeros(rows, n);
    for (r, (&i, &wi)) in region.iter().zip(&w).enumerate() {
        let sw = wi.sqrt();
        b[(2 * r, i)] = sw / m[i].sqrt();
        for j in 0..n {
            b[(2 * r + 1, j)] = sw * s[(i, j)] / m[j].sqrt();
        }
    }
    let svd = b.svd(false, true);
    let vt = svd.v_t.expect("right singular vectors requested");
    let k = svd.singular_values.imin();
    let sigma = svd.singular_values[k];
    let minimizer = (0..n).map(|i| vt[(k, i)] / m[i].sqrt()).collect();
    Ok(SucpProbe { value: sigma * sigma, minimizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::assemble_local_operator;
    use crate::grid::{sample_coefficient, CoefficientSpec, Truncation};
    use crate::spectral::{eigendecompose, fractional_power};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
    }

    fn radii() -> Vec<f64> {
        (0..9).map(|k| 0.2 + 0.1 * k as f64).collect()
    }

    #[test]
    fn mu_beta_examples() {
        let id = DMatrix::<f64>::identity(2, 2);
        let (mu, beta) = mu_beta(&id, &[0.3, -0.4]).unwrap();
        assert!((mu - 1.0).abs() < 1e-15);
        assert_eq!(beta, vec![0.3, -0.4]);
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let (mu, beta) = mu_beta(&a, &[1.0, 0.0]).unwrap();
        assert_eq!(mu, 2.0);
        assert_eq!(beta, vec![1.0, 0.0]);
        assert!(mu_beta(&a, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn mu_respects_ellipticity_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bound: f64 = 3.0;
        for _ in 0..200 {
            let th: f64 = rng.random_range(0.0..3.2);
            let l1 = rng.random_range(1.0 / bound..bound);
            let l2 = rng.random_range(1.0 / bound..bound);
            let r = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
            let a = &r * DMatrix::from_diagonal(&DVector::from_vec(vec![l1, l2])) * r.transpose();
            let z = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let (mu, beta) = mu_beta(&a, &z).unwrap();
            assert!(mu >= 1.0 / bound - 1e-12 && mu <= bound + 1e-12);
            let bn = (beta[0].powi(2) + beta[1].powi(2)).sqrt();
            let zn = (z[0].powi(2) + z[1].powi(2)).sqrt();
            assert!(bn <= bound * bound * zn + 1e-12);
        }
    }

    #[test]
    fn normalization_maps_coefficient_to_identity() {
        let a0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g = FrequencyGeometry::new(&[0.1], &a0, 3.0).unwrap();
        let id = g.normalized_coefficient(&a0);
        assert!((id - DMatrix::<f64>::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn homogeneous_degree_one_and_two() {
        let s = 0.5;
        let x = uniform(-1.3, 1.3, 105);
        let y = uniform(-1.3, 1.3, 105);
        let geom = FrequencyGeometry::identity(&[0.0]);
        let f1 = SampledField::from_fn(vec![x.clone()], y.clone(), s, |z| z[0]).unwrap();
        let p1 = frequency_profile(&f1, &geom, &radii()).unwrap();
        let c = 1.0 / (2.0 - 2.0 * s);
        let f2 = SampledField::from_fn(vec![x], y, s, |z| z[0] * z[0] - c * z[1] * z[1]).unwrap();
        let p2 = frequency_profile(&f2, &geom, &radii()).unwrap();
        for k in 0..radii().len() {
            assert!((p1.n[k] - 1.0).abs() < 0.1, "{:?}", p1.n);
            assert!((p2.n[k] - 2.0).abs() < 0.2, "{:?}", p2.n);
        }
        assert!(p1.quadrature_gap() < 0.1 && p2.quadrature_gap() < 0.1);
        let d1 = doubling_check(&p1, None).unwrap();
        let d2 = doubling_check(&p2, None).unwrap();
        for &(_, r) in &d1.ratios {
            assert!((r / 8.0 - 1.0).abs() < 0.15, "{:?}", d1.ratios);
        }
        for &(_, r) in &d2.ratios {
            assert!((r / 32.0 - 1.0).abs() < 0.15, "{:?}", d2.ratios);
        }
        assert!(d1.c_star < 0.5 && !d1.violation);
    }

    #[test]
    fn non_half_exponent_uses_weight() {
        // x is a solution for every s; H ∝ r^{n+1-2s+2}
        let s = 0.25;
        let x = uniform(-1.3, 1.3, 105);
        let f = SampledField::from_fn(vec![x.clone()], x, s, |z| z[0]).unwrap();
        let p = frequency_profile(&f, &FrequencyGeometry::identity(&[0.0]), &radii()).unwrap();
        let d = doubling_check(&p, None).unwrap();
        let expect = 2f64.powf(1.0 + 1.0 - 2.0 * s + 2.0);
        for &(_, r) in &d.ratios {
            assert!((r / expect - 1.0).abs() < 0.15);
        }
        assert!(p.n.iter().all(|v| (v - 1.0).abs() < 0.1));
    }

    #[test]
    fn constant_and_zero_fields() {
        let x = uniform(-1.3, 1.3, 53);
        let c = SampledField::from_fn(vec![x.clone()], x.clone(), 0.5, |_| 3.0).unwrap();
        let p = frequency_profile(&c, &FrequencyGeometry::identity(&[0.0]), &radii()).unwrap();
        assert!(p.d.iter().all(|v| v.abs() < 1e-20));
        assert!(p.n.iter().all(|v| v.abs() < 1e-20));
        let z = SampledField::from_fn(vec![x.clone()], x, 0.5, |_| 0.0).unwrap();
        assert_eq!(
            frequency_profile(&z, &FrequencyGeometry::identity(&[0.0]), &radii()).unwrap_err(),
            Error::VanishingField
        );
    }

    #[test]
    fn resolution_checks() {
        let x = uniform(-1.3, 1.3, 14);
        let f = SampledField::from_fn(vec![x.clone()], x.clone(), 0.5, |z| z[0]).unwrap();
        let geom = FrequencyGeometry::identity(&[0.0]);
        assert!(matches!(frequency_profile(&f, &geom, &[0.3]), Err(Error::InsufficientResolution(_))));
        assert!(matches!(frequency_profile(&f, &geom, &[2.0]), Err(Error::InsufficientResolution(_))));
        let fine = SampledField::from_fn(vec![uniform(-1.3, 1.3, 53)], uniform(-1.3, 1.3, 53), 0.5, |z| z[0]).unwrap();
        let short = frequency_profile(&fine, &geom, &[0.3, 0.4]).unwrap();
        assert!(doubling_check(&short, None).is_err());
    }

    fn frac(s: f64) -> FractionalOperator {
        let g = Grid::build(1, 1.0, 33, Truncation::Reflecting).unwrap();
        let c = sample_coefficient(&g, &CoefficientSpec::Identity).unwrap();
        let d = eigendecompose(&assemble_local_operator(&g, &c).unwrap()).unwrap();
        fractional_power(&d, s).unwrap()
    }

    #[test]
    fn sucp_whole_grid_and_monotonicity() {
        let f = frac(0.5);
        let all: Vec<usize> = (0..33).collect();
        assert!(sucp_probe(&f, &all, None).unwrap().value >= 1.0 - 1e-10);
        let chain = [vec![3], (2..6).collect::<Vec<_>>(), (0..12).collect(), (0..24).collect()];
        let vals: Vec<f64> = chain.iter().map(|o| sucp_probe(&f, o, None).unwrap().value).collect();
        for w in vals.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{vals:?}");
        }
        assert!(sucp_probe(&f, &[], None).is_err());
        let big: Vec<usize> = (2..30).collect();
        assert!(sucp_probe(&f, &big, None).unwrap().value > 1e-8);
        // fewer than half the nodes: the form has a null space
        assert!(sucp_probe(&f, &[16], None).unwrap().value < 1e-20);
        // locality at s = 1: u supported far from O annihilates both terms
        let local = frac(1.0);
        assert!(sucp_probe(&local, &big, None).unwrap().value < 1e-20);
    }
}
