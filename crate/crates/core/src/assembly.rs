//! Flux-form assembly of the local operator `-∇·(A∇)` on the spatial grid
//! and of the weighted degenerate operator on the `(x, y)` extension mesh.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::extension::ExtensionGrid;
use crate::grid::{CoefficientField, Grid, Truncation};

/// Discrete `L = -∇·(A∇)`, stored as `L = M⁻¹K` with `K` the symmetric
/// stiffness matrix and `M` the diagonal node masses.
#[derive(Clone, Debug)]
pub struct DiscreteEllipticOperator {
    dim: usize,
    spacing: f64,
    matrix: DMatrix<f64>,
    stiffness: DMatrix<f64>,
    masses: Vec<f64>,
    truncation: Truncation,
    diagonal_coefficient: bool,
}

impl DiscreteEllipticOperator {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    /// `L_mat`, acting on nodal values.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `M·L_mat`, symmetric.
    pub fn stiffness(&self) -> &DMatrix<f64> {
        &self.stiffness
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn truncation(&self) -> Truncation {
        self.truncation
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        mat_vec(&self.matrix, v)
    }

    /// Relative Frobenius asymmetry of `M·L_mat`.
    pub fn mass_asymmetry(&self) -> f64 {
        relative_asymmetry(&self.stiffness)
    }

    pub fn is_mass_symmetric(&self) -> bool {
        self.mass_asymmetry() <= 1e-12
    }

    /// Largest off-diagonal entry of `L_mat`; nonpositive for an M-matrix.
    pub fn max_off_diagonal(&self) -> f64 {
        let n = self.len();
        let mut best = f64::NEG_INFINITY;
        for j in 0..n {
            for i in 0..n {
                if i != j {
                    best = best.max(self.matrix[(i, j)]);
                }
            }
        }
        best
    }

    /// Whether the sign structure is asserted (diagonal coefficients) or
    /// only reported (full anisotropic coefficients).
    pub fn sign_structure_enforced(&self) -> bool {
        self.diagonal_coefficient
    }
}

pub(crate) fn mat_vec(a: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    let (r, c) = a.shape();
    assert_eq!(c, v.len());
    let mut out = vec![0.0; r];
    for j in 0..c {
        let vj = v[j];
        if vj == 0.0 {
            continue;
        }
        for (o, &a_ij) in out.iter_mut().zip(a.column(j).iter()) {
            *o += a_ij * vj;
        }
    }
    out
}

pub(crate) fn relative_asymmetry(a: &DMatrix<f64>) -> f64 {
    let norm = a.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (a - a.transpose()).norm() / norm
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Assembles the finite-volume operator. Each face between neighbours `i`,
/// `j` along an axis gets conductance `harmonic(A_dd(i), A_dd(j)) · |face| / h`
/// where `|face|` is the dual-cell face measure (`h^{n-1}` in the interior).
/// Off-diagonal entries of a full 2-D coefficient enter through a
/// cell-based symmetric cross-difference term.
pub fn assemble_local_operator(grid: &Grid, coeff: &CoefficientField) -> Result<DiscreteEllipticOperator> {
    if coeff.len() != grid.len() || coeff.dim() != grid.dim() {
        return Err(Error::DimensionMismatch { expected: grid.len(), found: coeff.len() });
    }
    let n = grid.len();
    let dim = grid.dim();
    let np = grid.points_per_axis();
    let h = grid.spacing();
    let dual_width = |k: usize| if k == 0 || k == np - 1 { 0.5 * h } else { h };
    let mut k_mat = DMatrix::<f64>::zeros(n, n);

    for i in 0..n {
        let mi = grid.multi_index(i);
        for d in 0..dim {
            let face: f64 = (0..dim).filter(|&e| e != d).map(|e| dual_width(mi[e])).product();
            let a_i = coeff.at(i)[(d, d)];
            if mi[d] + 1 < np {
                let mut mj = mi;
                mj[d] += 1;
                let j = grid.index(mj);
                let c = harmonic(a_i, coeff.at(j)[(d, d)]) * face / h;
                k_mat[(i, i)] += c;
                k_mat[(j, j)] += c;
                k_mat[(i, j)] -= c;
                k_mat[(j, i)] -= c;
            }
            if grid.truncation() == Truncation::Absorbing && (mi[d] == 0 || mi[d] == np - 1) {
                k_mat[(i, i)] += a_i * face / h;
            }
        }
    }

    if dim == 2 && !coeff.is_diagonal() {
        // cell gradients: ux, uy as averages of the two edge differences
        for cy in 0..np - 1 {
            for cx in 0..np - 1 {
                let nodes = [
                    grid.index([cx, cy]),
                    grid.index([cx + 1, cy]),
                    grid.index([cx, cy + 1]),
                    grid.index([cx + 1, cy + 1]),
                ];
                let a12 = nodes.iter().map(|&p| coeff.at(p)[(0, 1)]).sum::<f64>() / 4.0;
                if a12 == 0.0 {
                    continue;
                }
                let gx = [-0.5 / h, 0.5 / h, -0.5 / h, 0.5 / h];
                let gy = [-0.5 / h, -0.5 / h, 0.5 / h, 0.5 / h];
                let area = h * h;
                for a in 0..4 {
                    for b in 0..4 {
                        k_mat[(nodes[a], nodes[b])] += area * a12 * (gx[a] * gy[b] + gy[a] * gx[b]);
                    }
                }
            }
        }
    }

    let masses = grid.masses().to_vec();
    let mut matrix = k_mat.clone();
    for i in 0..n {
        let inv = 1.0 / masses[i];
        for j in 0..n {
            matrix[(i, j)] *= inv;
        }
    }
    Ok(DiscreteEllipticOperator {
        dim,
        spacing: h,
        matrix,
        stiffness: k_mat,
        masses,
        truncation: grid.truncation(),
        diagonal_coefficient: coeff.is_diagonal(),
    })
}

/// Upper truncation condition of the extension mesh.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TopCondition {
    /// Zero weighted flux at `y = Ymax` (reflecting truncation).
    Neumann,
    /// `U = 0` at `y = Ymax` (absorbing truncation).
    Dirichlet,
}

/// Discrete `-∇_{x,y}·(y^{1-2s} Ã ∇_{x,y})` with `Ã = diag(A, 1)`.
///
/// The operator has the tensor structure `E = W_y ⊗ K_x + K_y ⊗ M_x`, where
/// `K_x`, `M_x` are the spatial stiffness and masses, `W_y` holds the dual-cell
/// weight integrals `∫ y^{1-2s} dy` and `K_y` is the weighted three-point
/// stiffness in `y`. Nodes are ordered `p = j·n_x + i` (y-level `j`, spatial node `i`).
#[derive(Clone, Debug)]
pub struct ExtensionOperator {
    s: f64,
    spatial: DiscreteEllipticOperator,
    y_nodes: Vec<f64>,
    cell_weights: Vec<f64>,
    dual_weights: Vec<f64>,
    conductances: Vec<f64>,
    top: TopCondition,
}

impl ExtensionOperator {
    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn spatial(&self) -> &DiscreteEllipticOperator {
        &self.spatial
    }

    pub fn y_nodes(&self) -> &[f64] {
        &self.y_nodes
    }

    /// `∫_{y_{c-1}}^{y_c} y^{1-2s} dy` for cells `c = 1..=J` (index `c-1`).
    pub fn cell_weights(&self) -> &[f64] {
        &self.cell_weights
    }

    /// Lumped weights per y-node: half of each adjacent cell integral.
    pub fn dual_weights(&self) -> &[f64] {
        &self.dual_weights
    }

    /// Vertical conductances per cell, `1 / ∫_cell y^{2s-1} dy`.
    pub fn conductances(&self) -> &[f64] {
        &self.conductances
    }

    pub fn top(&self) -> TopCondition {
        self.top
    }

    pub fn x_len(&self) -> usize {
        self.spatial.len()
    }

    pub fn y_len(&self) -> usize {
        self.y_nodes.len()
    }

    pub fn len(&self) -> usize {
        self.x_len() * self.y_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Diagonal of the mass pairing `W_y ⊗ M_x`.
    pub fn mass_pairing(&self) -> Vec<f64> {
        let mx = self.spatial.masses();
        self.dual_weights.iter().flat_map(|&w| mx.iter().map(move |&m| w * m)).collect()
    }

    /// Applies `E` to a field ordered `j·n_x + i`.
    pub fn apply(&self, field: &[f64]) -> Vec<f64> {
        let nx = self.x_len();
        let ny = self.y_len();
        assert_eq!(field.len(), nx * ny);
        let mx = self.spatial.masses();
        let mut out = vec![0.0; nx * ny];
        for j in 0..ny {
            let row = &field[j * nx..(j + 1) * nx];
            let kx = mat_vec(self.spatial.stiffness(), row);
            for i in 0..nx {
                out[j * nx + i] += self.dual_weights[j] * kx[i];
            }
        }
        for c in 1..ny {
            let kappa = self.conductances[c - 1];
            for i in 0..nx {
                let flux = kappa * mx[i] * (field[c * nx + i] - field[(c - 1) * nx + i]);
                out[(c - 1) * nx + i] -= flux;
                out[c * nx + i] += flux;
            }
        }
        out
    }

    /// Weighted Dirichlet energy `½ UᵀEU`.
    pub fn energy(&self, field: &[f64]) -> f64 {
        0.5 * self.apply(field).iter().zip(field).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Materializes the full matrix; intended for small meshes.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let nx = self.x_len();
        let ny = self.y_len();
        let n = nx * ny;
        let kx = self.spatial.stiffness();
        let mx = self.spatial.masses();
        let mut e = DMatrix::<f64>::zeros(n, n);
        for j in 0..ny {
            for a in 0..nx {
                for b in 0..nx {
                    e[(j * nx + a, j * nx + b)] += self.dual_weights[j] * kx[(a, b)];
                }
            }
        }
        for c in 1..ny {
            let kappa = self.conductances[c - 1];
            for i in 0..nx {
                let (p, q) = ((c - 1) * nx + i, c * nx + i);
                let v = kappa * mx[i];
                e[(p, p)] += v;
                e[(q, q)] += v;
                e[(p, q)] -= v;
                e[(q, p)] -= v;
            }
        }
        e
    }
}

/// Exact `∫_a^b y^{p} dy` for `p > -1`, `0 <= a < b`.
pub(crate) fn power_integral(a: f64, b: f64, p: f64) -> f64 {
    (b.powf(p + 1.0) - a.powf(p + 1.0)) / (p + 1.0)
}

/// Assembles the degenerate extension operator on `ext_grid`. Cell weights
/// are exact integrals of `y^{1-2s}`; no nodal sampling of the weight.
pub fn assemble_extension_operator(
    ext_grid: &ExtensionGrid,
    coeff: &CoefficientField,
    s: f64,
) -> Result<ExtensionOperator> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::InvalidParameter(format!("extension exponent s must lie in (0,1), got {s}")));
    }
    let spatial = assemble_local_operator(ext_grid.spatial(), coeff)?;
    let y = ext_grid.y_nodes().to_vec();
    let cells = y.len() - 1;
    let cell_weights: Vec<f64> = (1..=cells).map(|c| power_integral(y[c - 1], y[c], 1.0 - 2.0 * s)).collect();
    let conductances: Vec<f64> = (1..=cells)
        .map(|c| 2.0 * s / (y[c].powf(2.0 * s) - y[c - 1].powf(2.0 * s)))
        .collect();
    let mut dual_weights = vec![0.0; y.len()];
    for c in 1..=cells {
        dual_weights[c - 1] += 0.5 * cell_weights[c - 1];
        dual_weights[c] += 0.5 * cell_weights[c - 1];
    }
    let top = match spatial.truncation() {
        Truncation::Reflecting => TopCondition::Neumann,
        Truncation::Absorbing => TopCondition::Dirichlet,
    };
    Ok(ExtensionOperator { s, spatial, y_nodes: y, cell_weights, dual_weights, conductances, top })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extension::build_extension_grid_with;
    use crate::grid::{sample_coefficient, CoefficientSpec};
    use std::f64::consts::PI;

    fn line(n: usize, l: f64, t: Truncation) -> (Grid, CoefficientField) {
        let g = Grid::build(1, l, n, t).unwrap();
        let c = sample_coefficient(&g, &CoefficientSpec::Identity).unwrap();
        (g, c)
    }

    #[test]
    fn three_point_stencil() {
        let (g, c) = line(3, 1.0, Truncation::Absorbing);
        let op = assemble_local_operator(&g, &c).unwrap();
        let row: Vec<f64> = op.matrix().row(1).iter().copied().collect();
        assert_eq!(row, vec![-1.0, 2.0, -1.0]);
        // boundary rows carry the halved mass
        assert_eq!(op.matrix()[(0, 0)], 4.0);
    }

    #[test]
    fn reflecting_rows_sum_to_zero() {
        let (g, c) = line(17, 2.0, Truncation::Reflecting);
        let op = assemble_local_operator(&g, &c).unwrap();
        let ones = vec![1.0; g.len()];
        assert!(op.apply(&ones).iter().all(|&v| v == 0.0));
        assert!(op.max_off_diagonal() <= 0.0);
        assert!(op.is_mass_symmetric());
    }

    #[test]
    fn two_dimensional_full_coefficient_is_mass_symmetric() {
        let g = Grid::build(2, 1.0, 9, Truncation::Reflecting).unwrap();
        let spec = CoefficientSpec::full(
            |x: &[f64]| nalgebra::Matrix2::new(2.0 + x[0], 0.3 * x[1], 0.3 * x[1], 1.5),
            4.0,
        );
        let c = sample_coefficient(&g, &spec).unwrap();
        let op = assemble_local_operator(&g, &c).unwrap();
        assert!(op.is_mass_symmetric());
        assert!(!op.sign_structure_enforced());
        let ones = vec![1.0; g.len()];
        assert!(op.apply(&ones).iter().all(|v| v.abs() < 1e-12));
    }

    fn manufactured_error(n: usize) -> f64 {
        let g = Grid::build(1, 1.0, n, Truncation::Reflecting).unwrap();
        let spec = CoefficientSpec::diagonal(vec![|x: &[f64]| 2.0 + (PI * x[0]).sin()]);
        let c = sample_coefficient(&g, &spec).unwrap();
        let op = assemble_local_operator(&g, &c).unwrap();
        let u: Vec<f64> = g.axis().iter().map(|&x| (PI * x / 2.0).cos()).collect();
        let lu = op.apply(&u);
        // -(a u')' with a = 2 + sin(πx), u = cos(πx/2)
        let exact = |x: f64| {
            let a = 2.0 + (PI * x).sin();
            let da = PI * (PI * x).cos();
            let du = -PI / 2.0 * (PI * x / 2.0).sin();
            let d2u = -PI * PI / 4.0 * (PI * x / 2.0).cos();
            -(da * du + a * d2u)
        };
        (1..n - 1).map(|i| (lu[i] - exact(g.axis()[i])).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn second_order_consistency() {
        let e1 = manufactured_error(65);
        let e2 = manufactured_error(129);
        let ratio = e1 / e2;
        assert!(e1 < 2e-2, "error {e1}");
        assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn extension_reduces_to_laplacian_at_half() {
        let (g, c) = line(5, 1.0, Truncation::Reflecting);
        let eg = build_extension_grid_with(&g, 3.0, 8, 1.0).unwrap();
        let op = assemble_extension_operator(&eg, &c, 0.5).unwrap();
        let dense = op.to_dense();
        // uniform y spacing 3/8 and x spacing 1/2: interior 5-point stencil
        let hx = 0.5;
        let hy = 3.0 / 8.0;
        let p = 3 * 5 + 2;
        assert!((dense[(p, p)] - (2.0 * hy / hx + 2.0 * hx / hy)).abs() < 1e-12);
        assert!((dense[(p, p + 1)] + hy / hx).abs() < 1e-12);
        assert!((dense[(p, p + 5)] + hx / hy).abs() < 1e-12);
        assert!(relative_asymmetry(&dense) == 0.0);
    }

    #[test]
    fn extension_annihilates_constants() {
        let (g, c) = line(9, 1.0, Truncation::Reflecting);
        for s in [0.1, 0.25, 0.5, 0.9] {
            let eg = build_extension_grid_with(&g, 4.0, 16, 2.0).unwrap();
            let op = assemble_extension_operator(&eg, &c, s).unwrap();
            let ones = vec![1.0; op.len()];
            let r = op.apply(&ones);
            assert!(r.iter().all(|v| v.abs() < 1e-9), "s = {s}");
            assert!(op.cell_weights().iter().all(|w| *w > 0.0 && w.is_finite()));
        }
    }

    #[test]
    fn first_cell_weight_closed_form() {
        let (g, c) = line(5, 1.0, Truncation::Reflecting);
        let eg = build_extension_grid_with(&g, 4.0, 16, 1.0).unwrap();
        let op = assemble_extension_operator(&eg, &c, 0.25).unwrap();
        let hy: f64 = 0.25;
        assert!((op.cell_weights()[0] - hy.powf(1.5) / 1.5).abs() < 1e-15);
        assert!(assemble_extension_operator(&eg, &c, 1.0).is_err());
        assert!(assemble_extension_operator(&eg, &c, 0.0).is_err());
    }

    #[test]
    fn dense_and_apply_agree() {
        let g = Grid::build(1, 1.0, 7, Truncation::Absorbing).unwrap();
        let spec = CoefficientSpec::diagonal(vec![|x: &[f64]| 1.5 + x[0]]);
        let c = sample_coefficient(&g, &spec).unwrap();
        let eg = build_extension_grid_with(&g, 2.5, 9, 1.7).unwrap();
        let op = assemble_extension_operator(&eg, &c, 0.3).unwrap();
        let v: Vec<f64> = (0..op.len()).map(|k| ((k * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let a = op.apply(&v);
        let b = mat_vec(&op.to_dense(), &v);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10 * (1.0 + x.abs()));
        }
    }
}
