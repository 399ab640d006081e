//! Scalar metrics shared by the experiment harness and the acceptance suite.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assembly::{assemble_extension_operator, assemble_local_operator, DiscreteEllipticOperator};
use crate::diagnostics::{doubling_check, frequency_profile, DoublingReport, FrequencyGeometry, FrequencyProfile, SampledField};
use crate::error::{Error, Result};
use crate::extension::{
    build_extension_grid, default_height, neumann_trace, poisson_extension, poisson_multiplier_quadrature,
    reflect_and_conjugate, solve_extension_dirichlet,
};
use crate::grid::{
    partition_domain, sample_coefficient, CoefficientField, CoefficientSpec, DomainPartition, Grid, Region, Truncation,
};
use crate::nonlocal::{assemble_dn_map, solve_dirichlet, Potential};
use crate::spectral::{
    eigendecompose, extension_constant, fractional_power, heat_kernel, FractionalOperator, SpectralDecomposition,
};

/// How a check compares its value with the tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Comparison {
    AtMost,
    AtLeast,
    /// Recorded without a threshold; always passes.
    Report,
}

/// One named metric with its tolerance and verdict.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub comparison: Comparison,
    pub passed: bool,
    /// Wall-clock metrics vary between runs and are kept out of deterministic output.
    pub volatile: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        let passed = value <= tolerance;
        Check { name: name.into(), value, tolerance, comparison: Comparison::AtMost, passed, volatile: false }
    }

    pub fn at_least(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        let passed = value >= tolerance;
        Check { name: name.into(), value, tolerance, comparison: Comparison::AtLeast, passed, volatile: false }
    }

    pub fn report(name: impl Into<String>, value: f64) -> Self {
        Check { name: name.into(), value, tolerance: f64::NAN, comparison: Comparison::Report, passed: true, volatile: false }
    }

    /// Boolean condition stored as 1 (true) or 0.
    pub fn flag(name: impl Into<String>, ok: bool) -> Self {
        Check::at_least(name, if ok { 1.0 } else { 0.0 }, 1.0)
    }

    pub fn runtime(name: impl Into<String>, seconds: f64, limit: f64) -> Self {
        Check { volatile: true, ..Check::at_most(name, seconds, limit) }
    }
}

/// Least-squares line through `(x, y)`; returns `(slope, intercept)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// `‖a - b‖_F / ‖b‖_F`.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Relative Euclidean distance `‖a - b‖ / ‖b‖`.
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[derive(Clone, Debug)]
pub struct SpectralChecks {
    /// `((s1, s2), ‖S(s1)S(s2) - S(s1+s2)‖ / ‖S(s1+s2)‖)`.
    pub semigroup: Vec<((f64, f64), f64)>,
    /// `‖S(1) - L‖ / ‖L‖`.
    pub unit_power: f64,
    /// `‖S(½)² - L‖ / ‖L‖`.
    pub half_square: f64,
    pub orthonormality: f64,
    pub reconstruction: f64,
}

impl SpectralChecks {
    pub fn max_semigroup(&self) -> f64 {
        self.semigroup.iter().map(|p| p.1).fold(0.0, f64::max)
    }
}

pub fn spectral_checks(op: &DiscreteEllipticOperator, decomp: &SpectralDecomposition) -> Result<SpectralChecks> {
    let power = |s: f64| fractional_power(decomp, s).map(|f| f.matrix().clone());
    let mut semigroup = Vec::new();
    for (a, b) in [(0.3, 0.4), (0.25, 0.25), (0.5, 0.5)] {
        let target = power(a + b)?;
        semigroup.push(((a, b), relative_frobenius(&(power(a)? * power(b)?), &target)));
    }
    let half = power(0.5)?;
    Ok(SpectralChecks {
        semigroup,
        unit_power: relative_frobenius(&power(1.0)?, op.matrix()),
        half_square: relative_frobenius(&(&half * &half), op.matrix()),
        orthonormality: decomp.orthonormality_error(),
        reconstruction: decomp.reconstruction_error(op),
    })
}

/// Node offsets along axis 0 from the grid centre used for the decay fit.
fn decay_offsets(grid: &Grid) -> std::ops::RangeInclusive<usize> {
    2..=8usize.min(grid.points_per_axis() / 4)
}

fn centre(grid: &Grid) -> [usize; 2] {
    let c = grid.points_per_axis() / 2;
    [c, if grid.dim() == 2 { c } else { 0 }]
}

/// Kernel values on the mid-grid row at short separations along axis 0.
pub fn kernel_row(grid: &Grid, frac: &FractionalOperator) -> Vec<(f64, f64)> {
    let c = centre(grid);
    let mid = grid.index(c);
    decay_offsets(grid)
        .map(|o| {
            let j = grid.index([c[0] + o, c[1]]);
            (grid.distance(mid, j), frac.kernel()[(mid, j)])
        })
        .collect()
}

/// Fitted log-log slope of the extracted kernel against distance.
pub fn kernel_decay_exponent(grid: &Grid, frac: &FractionalOperator) -> Result<f64> {
    let row = kernel_row(grid, frac);
    if row.len() < 3 {
        return Err(Error::InsufficientResolution("too few nodes for the kernel decay fit".into()));
    }
    if row.iter().any(|p| p.1 <= 0.0) {
        return Err(Error::InvalidParameter("kernel is not positive on the fit range".into()));
    }
    let xs: Vec<f64> = row.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = row.iter().map(|p| p.1.ln()).collect();
    Ok(linear_fit(&xs, &ys).0)
}

#[derive(Clone, Copy, Debug)]
pub struct KernelLaws {
    /// `max |K_ij - K_ji| / max |K|`.
    pub asymmetry: f64,
    /// Smallest off-diagonal entry relative to the largest.
    pub min_off_diagonal: f64,
}

pub fn kernel_laws(frac: &FractionalOperator) -> KernelLaws {
    let k = frac.kernel();
    let n = k.nrows();
    let scale = k.amax();
    let (mut asym, mut min) = (0.0f64, f64::INFINITY);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                asym = asym.max((k[(i, j)] - k[(j, i)]).abs());
                min = min.min(k[(i, j)]);
            }
        }
    }
    KernelLaws { asymmetry: asym / scale, min_off_diagonal: min / scale }
}

/// `max_i |Σ_j p_t(i,j) m_j - 1|`.
pub fn heat_mass_defect(decomp: &SpectralDecomposition, t: f64) -> Result<f64> {
    let p = heat_kernel(decomp, t)?;
    let m = decomp.masses();
    Ok((0..p.nrows())
        .map(|i| ((0..p.ncols()).map(|j| p[(i, j)] * m[j]).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max))
}

#[derive(Clone, Copy, Debug)]
pub struct GaussianSlope {
    pub t: f64,
    /// Slope of `ln p_t` against `r²/t` on the mid-grid row.
    pub slope: f64,
    pub points: usize,
    /// `-1/(4 a_min)`, the steepest Gaussian slope the ellipticity bounds allow.
    pub steepest: f64,
    /// `-1/(4 a_max)`.
    pub shallowest: f64,
    pub bracketed: bool,
}

/// Gaussian fit for separations with `r²/t ≤ 8` and `r ≤ Lbox/2`.
/// `bounds` are the ellipticity constants of the coefficient.
pub fn gaussian_log_slope(grid: &Grid, decomp: &SpectralDecomposition, t: f64, bounds: (f64, f64)) -> Result<GaussianSlope> {
    let p = heat_kernel(decomp, t)?;
    let c = centre(grid);
    let mid = grid.index(c);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for o in 1..grid.points_per_axis() - c[0] {
        let j = grid.index([c[0] + o, c[1]]);
        let r = grid.distance(mid, j);
        if r * r / t > 8.0 || r > 0.5 * grid.half_extent() || p[(mid, j)] <= 0.0 {
            break;
        }
        xs.push(r * r / t);
        ys.push(p[(mid, j)].ln());
    }
    if xs.len() < 3 {
        return Err(Error::InsufficientResolution(format!("too few nodes for the Gaussian fit at t = {t}")));
    }
    let slope = linear_fit(&xs, &ys).0;
    let steepest = -0.25 / bounds.0;
    let shallowest = -0.25 / bounds.1;
    // 10% slack on both sides of the ellipticity bracket
    let bracketed = slope >= 1.1 * steepest && slope <= 0.9 * shallowest;
    Ok(GaussianSlope { t, slope, points: xs.len(), steepest, shallowest, bracketed })
}

/// Seeded smooth exterior datum: a random combination of the first cosine
/// modes of the box, restricted to the exterior nodes.
pub fn smooth_exterior_datum(grid: &Grid, partition: &DomainPartition, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const MODES: usize = 4;
    let l = grid.half_extent();
    let coef: Vec<f64> = (0..MODES * MODES).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dim = grid.dim();
    partition
        .exterior()
        .iter()
        .map(|&i| {
            let x = grid.coords(i);
            let mode = |k: usize, d: usize| (k as f64 * std::f64::consts::PI * (x[d] + l) / (2.0 * l)).cos();
            let mut v = 0.0;
            for a in 0..MODES {
                for b in 0..if dim == 2 { MODES } else { 1 } {
                    let w = coef[a * MODES + b] / (1.0 + (a + b) as f64);
                    v += w * mode(a, 0) * if dim == 2 { mode(b, 1) } else { 1.0 };
                }
            }
            v
        })
        .collect()
}

/// Independent seeded generator for randomized checks.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `max ‖u‖_M / ‖g‖_{M,e}` over `count` smooth data; fails if any solve fails.
pub fn forward_bound_constant(
    grid: &Grid,
    frac: &FractionalOperator,
    q: &Potential,
    partition: &DomainPartition,
    seed: u64,
    count: usize,
) -> Result<f64> {
    let mut rng = seeded(seed);
    let m = frac.masses();
    let mut worst = 0.0f64;
    for _ in 0..count {
        let g = smooth_exterior_datum(grid, partition, &mut rng);
        let sol = solve_dirichlet(frac, q, partition, &g, None)?;
        let un: f64 = sol.u.iter().zip(m).map(|(u, w)| u * u * w).sum::<f64>().sqrt();
        let gn: f64 = partition.exterior().iter().zip(&g).map(|(&i, v)| v * v * m[i]).sum::<f64>().sqrt();
        worst = worst.max(un / gn);
    }
    Ok(worst)
}

/// Box-size sensitive quantities of a one-dimensional problem with
/// `Ω = (-½, ½)`, `O₁ = [¾, 7/4]`, `O₂ = -O₁`.
#[derive(Clone, Debug)]
pub struct TruncationProbe {
    pub half_extent: f64,
    /// `L^s` of a bump supported in `Ω`, sampled on `[-1, 1]`.
    pub centre_action: Vec<f64>,
    /// Extracted kernel on the mid-grid row at short separations.
    pub kernel_row: Vec<f64>,
    pub decay_exponent: f64,
    /// `⟨Λ g, g⟩` for a bump `g` in `O₁`.
    pub dn_self: f64,
    /// `⟨Λ g, h⟩` for bumps in `O₁` and `O₂`.
    pub dn_cross: f64,
}

pub fn truncation_probe(half_extent: f64, spacing: f64, s: f64) -> Result<TruncationProbe> {
    let n = (2.0 * half_extent / spacing).round() as usize + 1;
    let grid = Grid::build(1, half_extent, n, Truncation::Reflecting)?;
    let coeff = sample_coefficient(&grid, &CoefficientSpec::Identity)?;
    let decomp = eigendecompose(&assemble_local_operator(&grid, &coeff)?)?;
    let frac = fractional_power(&decomp, s)?;
    let bump = |x: f64, c: f64, r: f64| (1.0 - ((x - c) / r).powi(2)).max(0.0).powi(2);
    let u: Vec<f64> = (0..n).map(|i| bump(grid.coords(i)[0], 0.0, 0.5)).collect();
    let su = frac.apply(&u);
    let centre_action = (0..n).filter(|&i| grid.coords(i)[0].abs() <= 1.0 + 1e-9).map(|i| su[i]).collect();
    let partition = partition_domain(
        &grid,
        &Region::ball(&[0.0], 0.5),
        Some(&Region::interval(0.75, 1.75)),
        Some(&Region::interval(-1.75, -0.75)),
    )?;
    let dn = assemble_dn_map(&frac, &Potential::zero(&partition), &partition)?;
    let ext = partition.exterior();
    let g: Vec<f64> = ext.iter().map(|&i| bump(grid.coords(i)[0], 1.0, 0.4)).collect();
    let h: Vec<f64> = ext.iter().map(|&i| bump(grid.coords(i)[0], -1.0, 0.4)).collect();
    Ok(TruncationProbe {
        half_extent,
        centre_action,
        kernel_row: kernel_row(&grid, &frac).into_iter().map(|p| p.1).collect(),
        decay_exponent: kernel_decay_exponent(&grid, &frac)?,
        dn_self: dn.pairing(&g, &g),
        dn_cross: dn.pairing(&g, &h),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct TruncationChange {
    pub centre_action: f64,
    pub kernel_row: f64,
    pub decay_exponent: f64,
    pub dn_self: f64,
    pub dn_cross: f64,
}

impl TruncationChange {
    pub fn between(small: &TruncationProbe, large: &TruncationProbe) -> Self {
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        TruncationChange {
            centre_action: relative_l2(&small.centre_action, &large.centre_action),
            kernel_row: relative_l2(&small.kernel_row, &large.kernel_row),
            decay_exponent: rel(small.decay_exponent, large.decay_exponent),
            dn_self: rel(small.dn_self, large.dn_self),
            dn_cross: rel(small.dn_cross, large.dn_cross),
        }
    }

    /// Largest change among the gated metrics (the far-field cross pairing is excluded).
    pub fn gated_max(&self) -> f64 {
        self.centre_action.max(self.kernel_row).max(self.decay_exponent).max(self.dn_self)
    }
}

/// Neumann-trace estimator errors against `2s·d_s·L^s u`.
#[derive(Clone, Copy, Debug)]
pub struct TraceConsistency {
    pub layers: usize,
    pub weak_form: f64,
    pub difference_quotient: f64,
}

/// Solves the extension problem for `datum` with `layers` vertical cells
/// (height from the spectrum) and compares both trace estimators with the
/// spectral oracle.
pub fn trace_consistency(
    grid: &Grid,
    coeff: &CoefficientField,
    decomp: &SpectralDecomposition,
    s: f64,
    datum: &[f64],
    layers: usize,
) -> Result<TraceConsistency> {
    let eg = build_extension_grid(grid, None, s, default_height(decomp), layers, None)?;
    let op = assemble_extension_operator(&eg, coeff, s)?;
    let sol = solve_extension_dirichlet(&op, datum, None)?;
    let tr = neumann_trace(&sol);
    let su = fractional_power(decomp, s)?.apply(datum);
    let c = 2.0 * s * extension_constant(s);
    let expect: Vec<f64> = su.iter().map(|v| c * v).collect();
    Ok(TraceConsistency {
        layers,
        weak_form: relative_l2(&tr.weak_form, &expect),
        difference_quotient: relative_l2(&tr.difference_quotient, &expect),
    })
}

/// Relative distance between the variational and Poisson-spectral fields.
pub fn poisson_agreement(
    grid: &Grid,
    coeff: &CoefficientField,
    decomp: &SpectralDecomposition,
    s: f64,
    datum: &[f64],
    layers: usize,
) -> Result<f64> {
    let eg = build_extension_grid(grid, None, s, default_height(decomp), layers, None)?;
    let op = assemble_extension_operator(&eg, coeff, s)?;
    let var = solve_extension_dirichlet(&op, datum, None)?;
    let poi = poisson_extension(&op, decomp, datum)?;
    Ok(relative_l2(var.field(), poi.field()))
}

/// `max_y |φ_y(0) - 1|` for the quadrature Poisson multiplier.
pub fn poisson_normalization(s: f64, heights: &[f64]) -> f64 {
    heights.iter().map(|&y| (poisson_multiplier_quadrature(s, y, 0.0) - 1.0).abs()).fold(0.0, f64::max)
}

/// Analytic `H(2r)/H(r)` for a homogeneous field of the given degree.
pub fn homogeneous_doubling_ratio(degree: u32, n: usize, s: f64) -> f64 {
    2f64.powf(2.0 * degree as f64 + n as f64 + 1.0 - 2.0 * s)
}

/// Degree-`d` homogeneous solution of the weighted equation in `(x, y)`, `n = 1`.
fn homogeneous(degree: u32, s: f64, z: &[f64]) -> f64 {
    match degree {
        1 => z[0],
        // x² - c y² with c = 1/(2 - 2s) solves ∂_x² U + y^{2s-1} ∂_y(y^{1-2s} ∂_y U) = 0
        2 => z[0] * z[0] - z[1] * z[1] / (2.0 - 2.0 * s),
        _ => panic!("only degrees 1 and 2 are tabulated"),
    }
}

/// Frequency profile of a homogeneous field sampled on a uniform
/// `105 x 105` mesh of `[-1.3, 1.3]²`, radii `0.2..1.0`.
pub fn homogeneous_profile(degree: u32, s: f64) -> Result<(FrequencyProfile, DoublingReport)> {
    let radii: Vec<f64> = (0..9).map(|k| 0.2 * 5f64.powf(k as f64 / 8.0)).collect();
    homogeneous_profile_at(degree, s, &radii)
}

/// Same mesh with caller-chosen radii (at most 1.3).
pub fn homogeneous_profile_at(degree: u32, s: f64, radii: &[f64]) -> Result<(FrequencyProfile, DoublingReport)> {
    let axis: Vec<f64> = (0..105).map(|k| -1.3 + 2.6 * k as f64 / 104.0).collect();
    let field = SampledField::from_fn(vec![axis.clone()], axis, s, |z| homogeneous(degree, s, z))?;
    let profile = frequency_profile(&field, &FrequencyGeometry::identity(&[0.0]), radii)?;
    let doubling = doubling_check(&profile, None)?;
    Ok((profile, doubling))
}

/// Frequency profile of an extension solution with `A = 1 + 0.3 sin x`,
/// `s = ½`, datum supported in `x > 1` and the ball centred at `x = -2` on
/// the plane where the Neumann trace is small.
pub fn variable_coefficient_profile() -> Result<(FrequencyProfile, DoublingReport, f64)> {
    let n = 129;
    let s = 0.5;
    let grid = Grid::build(1, 4.0, n, Truncation::Reflecting)?;
    let spec = CoefficientSpec::diagonal(vec![|x: &[f64]| 1.0 + 0.3 * x[0].sin()]);
    let coeff = sample_coefficient(&grid, &spec)?;
    let decomp = eigendecompose(&assemble_local_operator(&grid, &coeff)?)?;
    let eg = build_extension_grid(&grid, None, s, default_height(&decomp), 128, None)?;
    let op = assemble_extension_operator(&eg, &coeff, s)?;
    let datum: Vec<f64> = (0..n)
        .map(|i| {
            let x = grid.coords(i)[0];
            if x > 1.0 { (-4.0 * (x - 2.5).powi(2)).exp() } else { 0.0 }
        })
        .collect();
    let sol = solve_extension_dirichlet(&op, &datum, None)?;
    let patch: Vec<usize> = (0..n).filter(|&i| (grid.coords(i)[0] + 2.0).abs() <= 1.2).collect();
    let peak = neumann_trace(&sol).weak_form.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let (even, _, report) = reflect_and_conjugate(&op, &sol, &patch, 0.1 * peak, 0.05)?;
    let field = SampledField::from_reflected(&grid, Some(&coeff), &even, s)?;
    let a0 = DMatrix::from_row_slice(2, 2, &[1.0 + 0.3 * (-2.0f64).sin(), 0.0, 0.0, 1.0]);
    let geometry = FrequencyGeometry::new(&[-2.0], &a0, coeff.ellipticity())?;
    let radii: Vec<f64> = (0..10).map(|k| 0.25 * 4f64.powf(k as f64 / 9.0)).collect();
    let profile = frequency_profile(&field, &geometry, &radii)?;
    let doubling = doubling_check(&profile, None)?;
    Ok((profile, doubling, report.off_plane))
}
