//! Degenerate extension problem in the half-space `(x, y)`, `y > 0`: graded
//! vertical mesh, modal and dense solvers, the heat-kernel Poisson formula,
//! weighted Neumann-trace estimators, and even/odd reflections with the
//! conjugate field.

use nalgebra::DMatrix;

use crate::assembly::{mat_vec, power_integral, ExtensionOperator, TopCondition};
use crate::error::{Error, Result};
use crate::grid::{DomainPartition, Grid};
use crate::special::{gamma, poisson_zero_mode_tail};
use crate::spectral::{eigendecompose, SpectralDecomposition};

/// Spatial grid together with graded vertical nodes `y_j = Y (j/J)^γ`.
#[derive(Clone, Debug)]
pub struct ExtensionGrid {
    spatial: Grid,
    y_nodes: Vec<f64>,
    gamma: f64,
    height: f64,
}

impl ExtensionGrid {
    pub fn spatial(&self) -> &Grid {
        &self.spatial
    }

    pub fn y_nodes(&self) -> &[f64] {
        &self.y_nodes
    }

    pub fn grading(&self) -> f64 {
        self.gamma
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn layers(&self) -> usize {
        self.y_nodes.len() - 1
    }

    /// `∫ y^{1-2s}` over each vertical cell.
    pub fn cell_weights(&self, s: f64) -> Vec<f64> {
        self.y_nodes.windows(2).map(|w| power_integral(w[0], w[1], 1.0 - 2.0 * s)).collect()
    }
}

/// Grading that resolves the `y^{2s}` boundary layer: `1/(1-s)` clipped to `[1, 4]`.
pub fn default_grading(s: f64) -> f64 {
    (2.0 / (2.0 - 2.0 * s)).clamp(1.0, 4.0)
}

/// Height at which the slowest nonconstant mode has decayed below `1e-8`.
pub fn default_height(decomp: &SpectralDecomposition) -> f64 {
    let lam = decomp.smallest_positive().unwrap_or(1.0);
    1.05 * 1e8f64.ln() / lam.sqrt()
}

/// Builds the extension mesh. The height must exceed the diameter of the
/// interior domain when a partition is supplied.
pub fn build_extension_grid(
    grid: &Grid,
    partition: Option<&DomainPartition>,
    s: f64,
    height: f64,
    layers: usize,
    grading: Option<f64>,
) -> Result<ExtensionGrid> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::InvalidParameter(format!("extension exponent s must lie in (0,1), got {s}")));
    }
    if let Some(p) = partition {
        let diam = diameter(grid, p.interior());
        if height <= diam {
            return Err(Error::InvalidParameter(format!(
                "extension height {height} does not exceed the domain diameter {diam}"
            )));
        }
    }
    build_extension_grid_with(grid, height, layers, grading.unwrap_or_else(|| default_grading(s)))
}

/// Builds the extension mesh with an explicit grading exponent.
pub fn build_extension_grid_with(grid: &Grid, height: f64, layers: usize, grading: f64) -> Result<ExtensionGrid> {
    if !(height > 0.0) || !height.is_finite() {
        return Err(Error::InvalidParameter(format!("extension height must be positive, got {height}")));
    }
    if layers < 8 {
        return Err(Error::InvalidParameter(format!("need at least 8 vertical layers, got {layers}")));
    }
    if !(grading >= 1.0) {
        return Err(Error::InvalidParameter(format!("grading exponent must be >= 1, got {grading}")));
    }
    let y_nodes: Vec<f64> = (0..=layers)
        .map(|j| height * (j as f64 / layers as f64).powf(grading))
        .collect();
    if !(y_nodes[1] > 0.0) {
        return Err(Error::InvalidParameter("first vertical spacing underflows".into()));
    }
    Ok(ExtensionGrid { spatial: grid.clone(), y_nodes, gamma: grading, height })
}

fn diameter(grid: &Grid, nodes: &[usize]) -> f64 {
    let mut d: f64 = 0.0;
    for (a, &i) in nodes.iter().enumerate() {
        for &j in &nodes[a + 1..] {
            d = d.max(grid.distance(i, j));
        }
    }
    d
}

/// Right-hand side of the weak extension problem.
#[derive(Clone, Debug, PartialEq)]
pub enum ExtensionSource {
    /// Vertical component `G_y` per cell, ordered `(c-1)·n_x + i`; it enters as
    /// `Σ m_i G_{c,i} (φ_c - φ_{c-1})`.
    Vertical(Vec<f64>),
    /// Raw nodal load vector on the extension mesh.
    Load(Vec<f64>),
}

impl ExtensionSource {
    /// Nodal load vector.
    pub fn load(&self, op: &ExtensionOperator) -> Result<Vec<f64>> {
        let nx = op.x_len();
        match self {
            ExtensionSource::Load(b) => {
                if b.len() != op.len() {
                    return Err(Error::DimensionMismatch { expected: op.len(), found: b.len() });
                }
                Ok(b.clone())
            }
            ExtensionSource::Vertical(g) => {
                let cells = op.y_len() - 1;
                if g.len() != cells * nx {
                    return Err(Error::DimensionMismatch { expected: cells * nx, found: g.len() });
                }
                let m = op.spatial().masses();
                let mut b = vec![0.0; op.len()];
                for c in 1..=cells {
                    for i in 0..nx {
                        let v = m[i] * g[(c - 1) * nx + i];
                        b[c * nx + i] += v;
                        b[(c - 1) * nx + i] -= v;
                    }
                }
                Ok(b)
            }
        }
    }

    /// `‖y^{2s-1} G‖` in the `y^{1-2s}` weighted norm; `None` for raw loads.
    pub fn weighted_norm(&self, op: &ExtensionOperator) -> Option<f64> {
        match self {
            ExtensionSource::Load(_) => None,
            ExtensionSource::Vertical(g) => {
                let nx = op.x_len();
                let m = op.spatial().masses();
                let sum: f64 = op
                    .conductances()
                    .iter()
                    .enumerate()
                    .map(|(c, k)| (0..nx).map(|i| m[i] * g[c * nx + i].powi(2)).sum::<f64>() / k)
                    .sum();
                Some(sum.sqrt())
            }
        }
    }
}

/// Extension field `U(x_i, y_j)` stored as `j·n_x + i`.
#[derive(Clone, Debug)]
pub struct ExtensionSolution {
    s: f64,
    x_len: usize,
    y_nodes: Vec<f64>,
    field: Vec<f64>,
    deviation: Vec<f64>,
    trace: Vec<f64>,
    residual: f64,
    masses: Vec<f64>,
    conductances: Vec<f64>,
    dual_weights: Vec<f64>,
    tangential: Vec<f64>,
    source: Option<ExtensionSource>,
}

impl ExtensionSolution {
    /// Wraps a field computed elsewhere (for example by the Poisson formula)
    /// so the trace estimators and reflections apply to it.
    pub fn from_field(op: &ExtensionOperator, field: Vec<f64>) -> Result<Self> {
        if field.len() != op.len() {
            return Err(Error::DimensionMismatch { expected: op.len(), found: field.len() });
        }
        let nx = op.x_len();
        let trace = field[..nx].to_vec();
        let deviation: Vec<f64> = field.iter().enumerate().map(|(p, v)| v - trace[p % nx]).collect();
        let mut sol = Self::assemble(op, trace, deviation, None, None)?;
        sol.residual = deviation_residual(op, &sol.trace, &sol.deviation, None, &interior_rows(op));
        Ok(sol)
    }

    fn assemble(
        op: &ExtensionOperator,
        trace: Vec<f64>,
        deviation: Vec<f64>,
        load: Option<&[f64]>,
        source: Option<ExtensionSource>,
    ) -> Result<Self> {
        let nx = op.x_len();
        let field: Vec<f64> = deviation.iter().enumerate().map(|(p, v)| trace[p % nx] + v).collect();
        let masses = op.spatial().masses().to_vec();
        let kx = mat_vec(op.spatial().stiffness(), &trace);
        let w0 = op.dual_weights()[0];
        let tangential = (0..nx)
            .map(|i| (w0 * kx[i] - load.map_or(0.0, |b| b[i])) / masses[i])
            .collect();
        Ok(ExtensionSolution {
            s: op.s(),
            x_len: nx,
            y_nodes: op.y_nodes().to_vec(),
            field,
            deviation,
            trace,
            residual: 0.0,
            masses,
            conductances: op.conductances().to_vec(),
            dual_weights: op.dual_weights().to_vec(),
            tangential,
            source,
        })
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn x_len(&self) -> usize {
        self.x_len
    }

    pub fn y_nodes(&self) -> &[f64] {
        &self.y_nodes
    }

    pub fn field(&self) -> &[f64] {
        &self.field
    }

    /// `U - u⊗𝟙`, free of the cancellation near `y = 0`.
    pub fn deviation(&self) -> &[f64] {
        &self.deviation
    }

    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn level(&self, j: usize) -> &[f64] {
        &self.field[j * self.x_len..(j + 1) * self.x_len]
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn source(&self) -> Option<&ExtensionSource> {
        self.source.as_ref()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.field[j * self.x_len + i]
    }

    /// `(Σ_j w_j Σ_i m_i U_ij²)^{1/2}`.
    pub fn weighted_norm(&self) -> f64 {
        let nx = self.x_len;
        self.dual_weights
            .iter()
            .enumerate()
            .map(|(j, w)| w * (0..nx).map(|i| self.masses[i] * self.field[j * nx + i].powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Modal solver: diagonalizes the tangential operator once and solves one
/// tridiagonal system in `y` per eigenmode.
#[derive(Clone, Debug)]
pub struct ExtensionSolver {
    op: ExtensionOperator,
    decomp: SpectralDecomposition,
}

impl ExtensionSolver {
    pub fn new(op: &ExtensionOperator) -> Result<Self> {
        let decomp = eigendecompose(op.spatial())?;
        Ok(ExtensionSolver { op: op.clone(), decomp })
    }

    pub fn operator(&self) -> &ExtensionOperator {
        &self.op
    }

    pub fn decomposition(&self) -> &SpectralDecomposition {
        &self.decomp
    }

    /// Solves `E U = b` with `U(·,0) = datum` and the top condition of the operator.
    pub fn solve(&self, datum: &[f64], source: Option<&ExtensionSource>) -> Result<ExtensionSolution> {
        let op = &self.op;
        let nx = op.x_len();
        let ny = op.y_len();
        if datum.len() != nx {
            return Err(Error::DimensionMismatch { expected: nx, found: datum.len() });
        }
        let load = source.map(|s| s.load(op)).transpose()?;
        let top = match op.top() {
            TopCondition::Neumann => ny - 1,
            TopCondition::Dirichlet => ny - 2,
        };
        let w = op.dual_weights();
        let kappa = op.conductances();
        let lam = self.decomp.eigenvalues();
        let coeff = self.decomp.coefficients(datum);
        let vt = self.decomp.vectors().transpose();
        // projected loads, one row per level
        let projected: Option<Vec<Vec<f64>>> = load
            .as_ref()
            .map(|b| (0..ny).map(|j| mat_vec(&vt, &b[j * nx..(j + 1) * nx])).collect());

        let mut modal = vec![vec![0.0; nx]; ny];
        let (mut lower, mut diag, mut upper, mut rhs) =
            (vec![0.0; top], vec![0.0; top], vec![0.0; top], vec![0.0; top]);
        for k in 0..nx {
            let c = coeff[k];
            for r in 0..top {
                let j = r + 1;
                let below = kappa[j - 1];
                let above = if j < ny - 1 { kappa[j] } else { 0.0 };
                diag[r] = lam[k] * w[j] + below + above;
                lower[r] = -below;
                upper[r] = -above;
                rhs[r] = projected.as_ref().map_or(0.0, |p| p[j][k]) - lam[k] * w[j] * c;
            }
            if op.top() == TopCondition::Dirichlet {
                rhs[top - 1] -= kappa[ny - 2] * c;
            }
            let sol = thomas(&lower, &diag, &upper, &rhs);
            for r in 0..top {
                modal[r + 1][k] = sol[r];
            }
            if op.top() == TopCondition::Dirichlet {
                modal[ny - 1][k] = -c;
            }
        }
        let mut deviation = vec![0.0; nx * ny];
        for j in 1..ny {
            let level = if op.top() == TopCondition::Dirichlet && j == ny - 1 {
                datum.iter().map(|v| -v).collect()
            } else {
                self.decomp.synthesize(&modal[j])
            };
            deviation[j * nx..(j + 1) * nx].copy_from_slice(&level);
        }
        let rows: Vec<usize> = (1..=top).collect();
        let residual = deviation_residual(op, datum, &deviation, load.as_deref(), &rows);
        let mut sol = ExtensionSolution::assemble(op, datum.to_vec(), deviation, load.as_deref(), source.cloned())?;
        sol.residual = residual;
        Ok(sol)
    }
}

fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let den = diag[i] - lower[i] * c[i - 1];
        c[i] = upper[i] / den;
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / den;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

fn interior_rows(op: &ExtensionOperator) -> Vec<usize> {
    let ny = op.y_len();
    match op.top() {
        TopCondition::Neumann => (1..ny).collect(),
        TopCondition::Dirichlet => (1..ny - 1).collect(),
    }
}

/// Relative residual of the free rows, evaluated as `E(u⊗𝟙) + E V - b`
/// where `E(u⊗𝟙)` only has the tangential part.
fn deviation_residual(op: &ExtensionOperator, datum: &[f64], deviation: &[f64], load: Option<&[f64]>, rows: &[usize]) -> f64 {
    let nx = op.x_len();
    let ev = op.apply(deviation);
    let kx = mat_vec(op.spatial().stiffness(), datum);
    let w = op.dual_weights();
    let (mut num, mut scale) = (0.0f64, 0.0f64);
    for &j in rows {
        for i in 0..nx {
            let p = j * nx + i;
            let base = w[j] * kx[i];
            let b = load.map_or(0.0, |l| l[p]);
            num += (base + ev[p] - b).powi(2);
            scale += base.powi(2) + ev[p].powi(2) + b.powi(2);
        }
    }
    if scale == 0.0 {
        0.0
    } else {
        (num / scale).sqrt()
    }
}

/// Solves the extension problem with the modal solver.
pub fn solve_extension_dirichlet(
    op: &ExtensionOperator,
    datum: &[f64],
    source: Option<&ExtensionSource>,
) -> Result<ExtensionSolution> {
    ExtensionSolver::new(op)?.solve(datum, source)
}

/// Same problem with a dense LU factorization of the free block; for small
/// meshes and cross-checks.
pub fn solve_extension_dense(
    op: &ExtensionOperator,
    datum: &[f64],
    source: Option<&ExtensionSource>,
) -> Result<ExtensionSolution> {
    let nx = op.x_len();
    let ny = op.y_len();
    if datum.len() != nx {
        return Err(Error::DimensionMismatch { expected: nx, found: datum.len() });
    }
    let load = source.map(|s| s.load(op)).transpose()?;
    let rows = interior_rows(op);
    let free: Vec<usize> = rows.iter().flat_map(|&j| (0..nx).map(move |i| j * nx + i)).collect();
    let e = op.to_dense();
    // fixed part of the deviation: zero at y = 0, -u on a Dirichlet top
    let mut fixed = vec![0.0; nx * ny];
    if op.top() == TopCondition::Dirichlet {
        for i in 0..nx {
            fixed[(ny - 1) * nx + i] = -datum[i];
        }
    }
    let ef = op.apply(&fixed);
    let kx = mat_vec(op.spatial().stiffness(), datum);
    let w = op.dual_weights();
    let nf = free.len();
    let mut a = DMatrix::<f64>::zeros(nf, nf);
    let mut rhs = DMatrix::<f64>::zeros(nf, 1);
    for (r, &p) in free.iter().enumerate() {
        for (c, &q) in free.iter().enumerate() {
            a[(r, c)] = e[(p, q)];
        }
        let (j, i) = (p / nx, p % nx);
        rhs[(r, 0)] = load.as_ref().map_or(0.0, |b| b[p]) - w[j] * kx[i] - ef[p];
    }
    let x = a
        .lu()
        .solve(&rhs)
        .ok_or(Error::NearSingular { condition: f64::INFINITY })?;
    let mut deviation = fixed;
    for (r, &p) in free.iter().enumerate() {
        deviation[p] = x[(r, 0)];
    }
    let residual = deviation_residual(op, datum, &deviation, load.as_deref(), &rows);
    let mut sol = ExtensionSolution::assemble(op, datum.to_vec(), deviation, load.as_deref(), source.cloned())?;
    sol.residual = residual;
    Ok(sol)
}

/// Log-trapezoid step in `ln t` for the Poisson multiplier.
const POISSON_STEP: f64 = 0.05;
/// Exponent at which the integrand is cut off at either end.
const POISSON_CUTOFF: f64 = 45.0;

/// `φ_y(λ) = y^{2s}/(4^s Γ(s)) ∫_0^∞ e^{-y²/4t - tλ} t^{-1-s} dt`, the
/// Poisson multiplier; `φ_y(0) = 1`.
pub fn poisson_multiplier(s: f64, y: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        1.0
    } else {
        poisson_multiplier_quadrature(s, y, lambda)
    }
}

/// The same multiplier by quadrature only, including `λ = 0` where the tail
/// beyond the quadrature window is added in closed form.
pub fn poisson_multiplier_quadrature(s: f64, y: f64, lambda: f64) -> f64 {
    let a = 0.25 * y * y;
    let t_lo = a / POISSON_CUTOFF;
    let (t_hi, tail) = if lambda > 0.0 {
        let hi = POISSON_CUTOFF / lambda;
        if hi <= t_lo {
            return 0.0;
        }
        (hi, 0.0)
    } else {
        let hi = 1e4 * a;
        (hi, poisson_zero_mode_tail(a, hi, s))
    };
    let span = (t_hi / t_lo).ln();
    let steps = (span / POISSON_STEP).ceil().max(2.0) as usize;
    let du = span / steps as f64;
    // integrand in u = ln t and its u-derivative
    let g = |t: f64| (-a / t - lambda * t).exp() * t.powf(-s);
    let dg = |t: f64| g(t) * (a / t - lambda * t - s);
    let mut sum = 0.0;
    for k in 0..=steps {
        let t = (t_lo.ln() + k as f64 * du).exp();
        sum += if k == 0 || k == steps { 0.5 * g(t) } else { g(t) };
    }
    // Euler-Maclaurin end correction; matters where the window cuts a slow tail
    let correction = du * du / 12.0 * (dg(t_hi) - dg(t_lo));
    let integral = sum * du - correction + tail;
    y.powf(2.0 * s) / (4f64.powf(s) * gamma(s)) * integral
}

/// `U(·, y)` from the trace by the Poisson formula.
pub fn poisson_kernel_apply(decomp: &SpectralDecomposition, s: f64, y: f64, datum: &[f64]) -> Result<Vec<f64>> {
    check_poisson(s, y)?;
    crate::spectral::apply_spectral_function(decomp, |l| poisson_multiplier(s, y, l), datum)
}

fn check_poisson(s: f64, y: f64) -> Result<()> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::InvalidParameter(format!("Poisson exponent must lie in (0,1), got {s}")));
    }
    if !(y > 0.0) {
        return Err(Error::InvalidParameter(format!("Poisson height must be positive, got {y}")));
    }
    Ok(())
}

/// Whole extension field on the levels of `op` from the Poisson formula.
pub fn poisson_extension(op: &ExtensionOperator, decomp: &SpectralDecomposition, datum: &[f64]) -> Result<ExtensionSolution> {
    let s = op.s();
    let nx = op.x_len();
    let coeff = decomp.coefficients(datum);
    let lam = decomp.eigenvalues();
    let mut field = vec![0.0; op.len()];
    field[..nx].copy_from_slice(datum);
    for (j, &y) in op.y_nodes().iter().enumerate().skip(1) {
        check_poisson(s, y)?;
        let scaled: Vec<f64> = coeff.iter().zip(lam.iter()).map(|(c, &l)| c * poisson_multiplier(s, y, l)).collect();
        field[j * nx..(j + 1) * nx].copy_from_slice(&decomp.synthesize(&scaled));
    }
    // the deviation is rebuilt modally to keep precision near y = 0
    let mut deviation = vec![0.0; op.len()];
    for (j, &y) in op.y_nodes().iter().enumerate().skip(1) {
        let scaled: Vec<f64> =
            coeff.iter().zip(lam.iter()).map(|(c, &l)| c * (poisson_multiplier(s, y, l) - 1.0)).collect();
        deviation[j * nx..(j + 1) * nx].copy_from_slice(&decomp.synthesize(&scaled));
    }
    let mut sol = ExtensionSolution::assemble(op, datum.to_vec(), deviation, None, None)?;
    sol.field = field;
    sol.residual = deviation_residual(op, datum, &sol.deviation, None, &interior_rows(op));
    Ok(sol)
}

/// Two estimators of the weighted Neumann trace `lim y^{1-2s} ∂_y U`.
#[derive(Clone, Debug)]
pub struct NeumannTrace {
    /// `2s (U(·,y_1) - U(·,0)) / y_1^{2s}`.
    pub difference_quotient: Vec<f64>,
    /// Residual of the trace row of the weak form, divided by the node mass.
    pub weak_form: Vec<f64>,
}

pub fn neumann_trace(solution: &ExtensionSolution) -> NeumannTrace {
    let nx = solution.x_len;
    let kappa = solution.conductances[0];
    let v1 = &solution.deviation[nx..2 * nx];
    let difference_quotient: Vec<f64> = v1.iter().map(|v| kappa * v).collect();
    let weak_form = difference_quotient.iter().zip(&solution.tangential).map(|(a, t)| a - t).collect();
    NeumannTrace { difference_quotient, weak_form }
}

/// Parity of a reflected field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
}

/// Field on mirrored vertical nodes (ascending, negative half first).
#[derive(Clone, Debug)]
pub struct ReflectedField {
    pub x_len: usize,
    pub y: Vec<f64>,
    pub values: Vec<f64>,
    pub parity: Parity,
}

impl ReflectedField {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.x_len + i]
    }

    pub fn level(&self, j: usize) -> &[f64] {
        &self.values[j * self.x_len..(j + 1) * self.x_len]
    }
}

/// `W = y^{1-2s} ∂_y U` at cell midpoints, oddly reflected.
#[derive(Clone, Debug)]
pub struct ConjugateField {
    pub field: ReflectedField,
    /// Cell values `W_c = κ_c (U_c - U_{c-1})` for `c = 1..=J` before reflection.
    pub cells: Vec<f64>,
}

/// Residual report of the reflected fields.
#[derive(Clone, Copy, Debug)]
pub struct ReflectionReport {
    /// Largest relative row residual of the even field off the plane `y = 0`.
    pub off_plane: f64,
    /// Largest relative row residual on `y = 0`, restricted to the patch.
    pub on_plane: f64,
    /// Largest relative residual of the conjugate equation on cells with `y ≥ y_min`.
    pub conjugate: f64,
    /// Largest estimated Neumann trace on the patch.
    pub patch_trace: f64,
}

/// Even reflection of `U`, odd reflection of `W`, and their residuals.
/// `patch` lists x-indices where the trace must stay below `threshold`;
/// pass `f64::INFINITY` for a diagnostic full-trace reflection.
pub fn reflect_and_conjugate(
    op: &ExtensionOperator,
    solution: &ExtensionSolution,
    patch: &[usize],
    threshold: f64,
    conjugate_from: f64,
) -> Result<(ReflectedField, ConjugateField, ReflectionReport)> {
    let nx = solution.x_len;
    let ny = solution.y_nodes.len();
    let trace = neumann_trace(solution).weak_form;
    let patch_trace = patch.iter().fold(0.0f64, |a, &i| a.max(trace[i].abs()));
    if patch_trace > threshold {
        return Err(Error::TraceNotVanishing { trace: patch_trace, threshold });
    }
    let y = &solution.y_nodes;
    let mut ry = Vec::with_capacity(2 * ny - 1);
    let mut rv = Vec::with_capacity((2 * ny - 1) * nx);
    for j in (1..ny).rev() {
        ry.push(-y[j]);
        rv.extend_from_slice(solution.level(j));
    }
    for j in 0..ny {
        ry.push(y[j]);
        rv.extend_from_slice(solution.level(j));
    }
    let even = ReflectedField { x_len: nx, y: ry, values: rv, parity: Parity::Even };

    let kappa = &solution.conductances;
    let mut cells = vec![0.0; (ny - 1) * nx];
    for c in 1..ny {
        for i in 0..nx {
            let d = solution.deviation[c * nx + i] - solution.deviation[(c - 1) * nx + i];
            cells[(c - 1) * nx + i] = kappa[c - 1] * d;
        }
    }
    let mid: Vec<f64> = y.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let mut wy = Vec::with_capacity(2 * mid.len());
    let mut wv = Vec::with_capacity(2 * cells.len());
    for c in (0..mid.len()).rev() {
        wy.push(-mid[c]);
        wv.extend(cells[c * nx..(c + 1) * nx].iter().map(|v| -v));
    }
    for c in 0..mid.len() {
        wy.push(mid[c]);
        wv.extend_from_slice(&cells[c * nx..(c + 1) * nx]);
    }
    let odd = ReflectedField { x_len: nx, y: wy, values: wv, parity: Parity::Odd };

    let s = solution.s;
    let rows: Vec<usize> = (1..2 * ny - 2).collect();
    let res = weighted_rows(op, &even.y, &even.values, 1.0 - 2.0 * s, &rows);
    let centre = ny - 1;
    let mut off = Residual::default();
    let mut on = Residual::default();
    for (r, &j) in rows.iter().enumerate() {
        for (i, &(num, scale)) in res[r].iter().enumerate() {
            if j != centre {
                off.add(num, scale);
            } else if patch.contains(&i) {
                on.add(num, scale);
            }
        }
    }
    // conjugate equation on the positive half, cells 2..J-1 above y_min
    let half = mid.len();
    let crows: Vec<usize> = (half + 1..odd.y.len() - 1).filter(|&r| odd.y[r] >= conjugate_from).collect();
    let mut conj = Residual::default();
    for row in conjugate_rows(op, solution, &odd, &crows) {
        for (num, scale) in row {
            conj.add(num, scale);
        }
    }
    let report = ReflectionReport {
        off_plane: off.value(),
        on_plane: on.value(),
        conjugate: conj.value(),
        patch_trace,
    };
    Ok((even, ConjugateField { field: odd, cells }, report))
}

/// Accumulates `‖r‖ / ‖scale‖` where `scale` holds the magnitude of the
/// terms summed in each row before cancellation.
#[derive(Default)]
struct Residual {
    num: f64,
    scale: f64,
}

impl Residual {
    fn add(&mut self, num: f64, scale: f64) {
        self.num += num * num;
        self.scale += scale * scale;
    }

    fn value(&self) -> f64 {
        if self.scale == 0.0 {
            0.0
        } else {
            (self.num / self.scale).sqrt()
        }
    }
}

fn abs_mat_vec(a: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..a.nrows()).map(|i| (0..a.ncols()).map(|j| (a[(i, j)] * v[j]).abs()).sum()).collect()
}

/// `∫_a^b |y|^p dy` on an arbitrary interval.
fn signed_power_integral(a: f64, b: f64, p: f64) -> f64 {
    let f = |y: f64| y.signum() * y.abs().powf(p + 1.0) / (p + 1.0);
    f(b) - f(a)
}

/// Row residuals `(|r|, term magnitude)` of `-∇·(|y|^p Ã∇V) = 0` at the
/// listed levels of a field on arbitrary vertical nodes, in the same
/// finite-volume form as the extension operator.
fn weighted_rows(op: &ExtensionOperator, y: &[f64], values: &[f64], p: f64, rows: &[usize]) -> Vec<Vec<(f64, f64)>> {
    let nx = op.x_len();
    let m = op.spatial().masses();
    let k = op.spatial().stiffness();
    let cell_w: Vec<f64> = y.windows(2).map(|w| signed_power_integral(w[0], w[1], p)).collect();
    let cond: Vec<f64> = y.windows(2).map(|w| 1.0 / signed_power_integral(w[0], w[1], -p)).collect();
    rows.iter()
        .map(|&j| {
            let dual = 0.5 * (cell_w[j - 1] + cell_w[j]);
            let lvl = &values[j * nx..(j + 1) * nx];
            let kx = mat_vec(k, lvl);
            let kabs = abs_mat_vec(k, lvl);
            (0..nx)
                .map(|i| {
                    let up = cond[j] * m[i] * (values[(j + 1) * nx + i] - lvl[i]);
                    let down = cond[j - 1] * m[i] * (lvl[i] - values[(j - 1) * nx + i]);
                    ((dual * kx[i] - up + down).abs(), dual * kabs[i] + up.abs() + down.abs())
                })
                .collect()
        })
        .collect()
}

/// Discrete conjugate equation `(W_{c+1}-W_c)/ω_c - (W_c-W_{c-1})/ω_{c-1} = L W_c / κ_c`,
/// the dual-weight counterpart of the extension operator on the staggered mesh.
fn conjugate_rows(
    op: &ExtensionOperator,
    solution: &ExtensionSolution,
    odd: &ReflectedField,
    rows: &[usize],
) -> Vec<Vec<(f64, f64)>> {
    let nx = op.x_len();
    let half = odd.y.len() / 2;
    let w = &solution.dual_weights;
    let kappa = &solution.conductances;
    let l = op.spatial().matrix();
    rows.iter()
        .map(|&r| {
            let c = r - half; // zero-based cell, W_{c+1} in one-based numbering
            let lvl = odd.level(r);
            let lw = mat_vec(l, lvl);
            let labs = abs_mat_vec(l, lvl);
            (0..nx)
                .map(|i| {
                    let up = (odd.at(i, r + 1) - lvl[i]) / w[c + 1];
                    let down = (lvl[i] - odd.at(i, r - 1)) / w[c];
                    ((up - down - lw[i] / kappa[c]).abs(), up.abs() + down.abs() + labs[i] / kappa[c])
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::assemble_extension_operator;
    use crate::grid::{sample_coefficient, CoefficientSpec, Truncation};
    use crate::spectral::{extension_constant, fractional_power};
    use std::f64::consts::PI;

    fn setup(n: usize, l: f64, t: Truncation, s: f64, h: f64, j: usize) -> (ExtensionOperator, SpectralDecomposition) {
        let g = Grid::build(1, l, n, t).unwrap();
        let spec = CoefficientSpec::diagonal(vec![|x: &[f64]| 1.0 + 0.3 * (x[0]).sin()]);
        let c = sample_coefficient(&g, &spec).unwrap();
        let eg = build_extension_grid(&g, None, s, h, j, None).unwrap();
        let op = assemble_extension_operator(&eg, &c, s).unwrap();
        let d = eigendecompose(op.spatial()).unwrap();
        (op, d)
    }

    fn smooth(op: &ExtensionOperator) -> Vec<f64> {
        let l = op.spatial().masses().len();
        (0..l).map(|i| {
            let x = -2.0 + 4.0 * i as f64 / (l - 1) as f64;
            (-x * x).exp()
        }).collect()
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn grid_grading_and_validation() {
        let g = Grid::build(1, 1.0, 9, Truncation::Reflecting).unwrap();
        let eg = build_extension_grid(&g, None, 0.5, 4.0, 8, None).unwrap();
        assert_eq!(eg.grading(), 2.0);
        for (j, y) in eg.y_nodes().iter().enumerate() {
            assert!((y - 4.0 * (j as f64 / 8.0).powi(2)).abs() < 1e-14);
        }
        let uni = build_extension_grid_with(&g, 4.0, 8, 1.0).unwrap();
        assert!(uni.y_nodes().windows(2).all(|w| (w[1] - w[0] - 0.5).abs() < 1e-14));
        assert_eq!(default_grading(0.9), 4.0);
        assert_eq!(default_grading(0.1), 1.0 / 0.9);
        assert!(build_extension_grid_with(&g, 4.0, 7, 1.0).is_err());
        assert!(build_extension_grid_with(&g, 4.0, 8, 0.5).is_err());
        assert!(build_extension_grid_with(&g, 0.0, 8, 1.0).is_err());
        let part = crate::grid::partition_domain(&g, &crate::grid::Region::ball(&[0.0], 0.6), None, None).unwrap();
        assert!(build_extension_grid(&g, Some(&part), 0.5, 0.5, 8, None).is_err());
        assert!(build_extension_grid(&g, Some(&part), 0.5, 3.0, 8, None).is_ok());
    }

    #[test]
    fn zero_datum_gives_zero_field() {
        let (op, _) = setup(17, 2.0, Truncation::Reflecting, 0.4, 10.0, 16);
        let sol = solve_extension_dirichlet(&op, &[0.0; 17], None).unwrap();
        assert!(sol.field().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn modal_and_dense_solvers_agree() {
        for t in [Truncation::Reflecting, Truncation::Absorbing] {
            let (op, _) = setup(13, 2.0, t, 0.3, 6.0, 12);
            let u = smooth(&op);
            let g: Vec<f64> = (0..op.len() - 13).map(|k| ((k % 7) as f64 - 3.0) * 0.01).collect();
            let src = ExtensionSource::Vertical(g);
            let a = solve_extension_dirichlet(&op, &u, Some(&src)).unwrap();
            let b = solve_extension_dense(&op, &u, Some(&src)).unwrap();
            assert!(rel(a.field(), b.field()) < 1e-10, "{t}");
            assert!(a.residual() < 1e-10 && b.residual() < 1e-10);
            assert_eq!(a.trace(), &u[..]);
            assert_eq!(a.level(0), &u[..]);
        }
    }

    #[test]
    fn energy_is_minimal() {
        let (op, _) = setup(11, 2.0, Truncation::Absorbing, 0.6, 6.0, 10);
        let u = smooth(&op);
        let sol = solve_extension_dirichlet(&op, &u, None).unwrap();
        let e0 = op.energy(sol.field());
        for seed in 0..5 {
            let mut f = sol.field().to_vec();
            for (p, v) in f.iter_mut().enumerate().skip(11).take(op.len() - 22) {
                *v += 1e-3 * (((p * 31 + seed * 7) % 13) as f64 - 6.0);
            }
            assert!(op.energy(&f) > e0);
        }
    }

    #[test]
    fn half_power_laplacian_separates_variables() {
        let g = Grid::build(1, 1.0, 33, Truncation::Absorbing).unwrap();
        let c = sample_coefficient(&g, &CoefficientSpec::Identity).unwrap();
        let d0 = eigendecompose(&crate::assembly::assemble_local_operator(&g, &c).unwrap()).unwrap();
        let height = default_height(&d0);
        let eg = build_extension_grid(&g, None, 0.5, height, 512, None).unwrap();
        let op = assemble_extension_operator(&eg, &c, 0.5).unwrap();
        let u: Vec<f64> = g.axis().iter().map(|x| (PI * (x + 1.0) / 2.0 * 1.0).sin()).collect();
        let sol = solve_extension_dirichlet(&op, &u, None).unwrap();
        // oracle: Σ ĉ_k e^{-√λ_k y} v_k
        let coeff = d0.coefficients(&u);
        for j in [32, 128, 256] {
            let y = op.y_nodes()[j];
            let scaled: Vec<f64> = coeff.iter().zip(d0.eigenvalues().iter()).map(|(c, l)| c * (-l.sqrt() * y).exp()).collect();
            let exact = d0.synthesize(&scaled);
            assert!(rel(sol.level(j), &exact) < 2e-3, "level {j}: {}", rel(sol.level(j), &exact));
        }
    }

    #[test]
    fn trace_of_eigenvector_matches_separation() {
        for s in [0.25, 0.5, 0.75] {
            let (_, d) = setup(33, 2.0, Truncation::Reflecting, s, 1.0, 8);
            let h = default_height(&d);
            let (op, d) = setup(33, 2.0, Truncation::Reflecting, s, h, 512);
            let k = 2;
            let v: Vec<f64> = d.vectors().column(k).iter().copied().collect();
            let sol = solve_extension_dirichlet(&op, &v, None).unwrap();
            let tr = neumann_trace(&sol);
            let lam = d.eigenvalues()[k];
            let expect: Vec<f64> = v.iter().map(|x| 2.0 * s * extension_constant(s) * lam.powf(s) * x).collect();
            assert!(rel(&tr.weak_form, &expect) < 0.02, "s={s}: {}", rel(&tr.weak_form, &expect));
            assert!(rel(&tr.difference_quotient, &expect) < 0.05, "s={s}: {}", rel(&tr.difference_quotient, &expect));
        }
    }

    #[test]
    fn half_trace_is_minus_square_root() {
        let (op, d) = setup(33, 2.0, Truncation::Reflecting, 0.5, 30.0, 256);
        let u = smooth(&op);
        let sol = solve_extension_dirichlet(&op, &u, None).unwrap();
        let half = fractional_power(&d, 0.5).unwrap();
        let expect: Vec<f64> = half.apply(&u).iter().map(|v| -v).collect();
        assert!(rel(&neumann_trace(&sol).weak_form, &expect) < 0.02);
    }

    #[test]
    fn poisson_multiplier_normalization_and_limits() {
        for s in [0.1, 0.25, 0.5, 0.75, 0.9] {
            for y in [1e-3, 0.1, 1.0, 10.0] {
                assert_eq!(poisson_multiplier(s, y, 0.0), 1.0);
                assert!((poisson_multiplier_quadrature(s, y, 0.0) - 1.0).abs() < 1e-8, "s={s} y={y}");
            }
        }
        // s = 1/2: φ_y(λ) = e^{-√λ y}
        for (y, l) in [(0.3, 2.0), (1.0, 0.5), (2.0, 10.0), (1e-3, 4.0)] {
            let v: f64 = poisson_multiplier(0.5, y, l);
            assert!((v - (-l.sqrt() * y).exp()).abs() < 1e-10);
        }
        assert_eq!(poisson_multiplier(0.5, 100.0, 100.0), 0.0);
    }

    #[test]
    fn poisson_preserves_constants_and_tends_to_trace() {
        let (op, d) = setup(33, 2.0, Truncation::Reflecting, 0.3, 10.0, 16);
        let ones = vec![1.0; 33];
        for y in [0.01, 0.5, 3.0] {
            let v = poisson_kernel_apply(&d, 0.3, y, &ones).unwrap();
            assert!(v.iter().all(|x| (x - 1.0).abs() < 1e-8));
        }
        let u = smooth(&op);
        let mut last = f64::INFINITY;
        for y in [1.0, 0.3, 0.1, 0.03, 0.01] {
            let v = poisson_kernel_apply(&d, 0.3, y, &u).unwrap();
            let e = rel(&v, &u);
            assert!(e < last);
            last = e;
        }
        assert!(poisson_kernel_apply(&d, 0.3, 0.0, &u).is_err());
        assert!(poisson_kernel_apply(&d, 1.0, 1.0, &u).is_err());
    }

    #[test]
    fn variational_and_poisson_solutions_agree() {
        let (_, d0) = setup(33, 2.0, Truncation::Reflecting, 0.5, 1.0, 8);
        let h = default_height(&d0);
        let (op, d) = setup(33, 2.0, Truncation::Reflecting, 0.5, h, 256);
        let u = smooth(&op);
        let var = solve_extension_dirichlet(&op, &u, None).unwrap();
        let poi = poisson_extension(&op, &d, &u).unwrap();
        assert!(rel(var.field(), poi.field()) < 0.02, "{}", rel(var.field(), poi.field()));
        let tr = neumann_trace(&poi);
        assert_eq!(tr.difference_quotient.len(), 33);
    }

    #[test]
    fn constant_field_has_zero_conjugate() {
        let (op, _) = setup(17, 2.0, Truncation::Reflecting, 0.4, 10.0, 16);
        let sol = solve_extension_dirichlet(&op, &[2.0; 17], None).unwrap();
        let (even, w, rep) = reflect_and_conjugate(&op, &sol, &[8], 1e-12, 0.0).unwrap();
        assert!(w.cells.iter().all(|v| v.abs() < 1e-12));
        assert!(even.values.iter().all(|v| (v - 2.0).abs() < 1e-12));
        assert!(rep.off_plane < 1e-12);
    }

    #[test]
    fn linear_in_y_has_unit_conjugate() {
        let (op, _) = setup(9, 1.0, Truncation::Reflecting, 0.5, 4.0, 8);
        let field: Vec<f64> = op.y_nodes().iter().flat_map(|&y| std::iter::repeat_n(y, 9)).collect();
        let sol = ExtensionSolution::from_field(&op, field).unwrap();
        let (_, w, _) = reflect_and_conjugate(&op, &sol, &[], f64::INFINITY, 0.0).unwrap();
        assert!(w.cells.iter().all(|v| (v - 1.0).abs() < 1e-12));
        for (k, &y) in w.field.y.iter().enumerate() {
            let expect = y.signum();
            assert!(w.field.level(k).iter().all(|v| (v - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn reflection_rejects_large_trace_and_checks_residuals() {
        let (_, d0) = setup(65, 4.0, Truncation::Reflecting, 0.5, 1.0, 8);
        let h = default_height(&d0);
        let (op, _) = setup(65, 4.0, Truncation::Reflecting, 0.5, h, 128);
        // datum supported on the right, patch on the left
        let u: Vec<f64> = (0..65).map(|i| {
            let x = -4.0 + 8.0 * i as f64 / 64.0;
            if x > 1.0 { (-(x - 2.5).powi(2) * 4.0).exp() } else { 0.0 }
        }).collect();
        let sol = solve_extension_dirichlet(&op, &u, None).unwrap();
        let patch: Vec<usize> = (8..24).collect();
        let tr = neumann_trace(&sol).weak_form;
        let peak = tr.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(matches!(
            reflect_and_conjugate(&op, &sol, &(40..56).collect::<Vec<_>>(), 1e-3 * peak, 0.0),
            Err(Error::TraceNotVanishing { .. })
        ));
        let (even, w, rep) = reflect_and_conjugate(&op, &sol, &patch, 0.1 * peak, 0.05).unwrap();
        assert!(rep.off_plane <= 1e-8, "{rep:?}");
        assert!(rep.conjugate <= 1e-6, "{rep:?}");
        let ny = op.y_len();
        for j in 0..ny {
            assert_eq!(even.level(ny - 1 + j), even.level(ny - 1 - j));
        }
        let half = w.field.y.len() / 2;
        for c in 0..half {
            let a = w.field.level(half + c);
            let b = w.field.level(half - 1 - c);
            assert!(a.iter().zip(b).all(|(x, y)| x == &-y));
        }
    }

    #[test]
    fn stability_ratio_is_bounded() {
        let (op, _) = setup(33, 2.0, Truncation::Absorbing, 0.4, 8.0, 64);
        let solver = ExtensionSolver::new(&op).unwrap();
        let m = op.spatial().masses();
        let mut ratios = Vec::new();
        for k in 1..=10 {
            let u: Vec<f64> = (0..33).map(|i| (k as f64 * PI * i as f64 / 32.0).sin()).collect();
            let sol = solver.solve(&u, None).unwrap();
            let norm: f64 = u.iter().zip(m).map(|(a, b)| a * a * b).sum::<f64>().sqrt();
            ratios.push(sol.weighted_norm() / norm);
        }
        let max = ratios.iter().cloned().fold(0.0, f64::max);
        assert!(max.is_finite() && max < 10.0, "{ratios:?}");
        let src = ExtensionSource::Vertical(vec![1.0; 64 * 33]);
        assert!(src.weighted_norm(&op).unwrap() > 0.0);
    }
}
