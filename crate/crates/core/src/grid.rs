//! Truncated Cartesian grid standing in for the whole space, its partition
//! into the interior domain and exterior control regions, and the sampled
//! coefficient field.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix2, SymmetricEigen};

use crate::error::{Error, Result};

/// Boundary condition applied on the faces of the truncation box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Truncation {
    /// Zero co-normal flux; the discrete heat kernel conserves mass.
    Reflecting,
    /// Zero Dirichlet ghost layer one spacing outside the box.
    Absorbing,
}

impl Truncation {
    pub fn tag(self) -> &'static str {
        match self {
            Truncation::Reflecting => "reflecting",
            Truncation::Absorbing => "absorbing",
        }
    }
}

impl fmt::Display for Truncation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Uniform grid on `[-half_extent, half_extent]^dim`, nodes ordered
/// lexicographically with axis 0 fastest.
#[derive(Clone, Debug)]
pub struct Grid {
    dim: usize,
    half_extent: f64,
    points_per_axis: usize,
    spacing: f64,
    axis: Vec<f64>,
    masses: Vec<f64>,
    truncation: Truncation,
}

impl Grid {
    /// Builds the grid. Node masses are trapezoidal cell volumes: `h^n` in
    /// the interior, halved once per truncation face the node lies on.
    pub fn build(dim: usize, half_extent: f64, points_per_axis: usize, truncation: Truncation) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidGrid(format!("dimension must be 1 or 2, got {dim}")));
        }
        if points_per_axis < 3 {
            return Err(Error::InvalidGrid(format!("need at least 3 points per axis, got {points_per_axis}")));
        }
        if !(half_extent > 0.0) || !half_extent.is_finite() {
            return Err(Error::InvalidGrid(format!("half extent must be positive, got {half_extent}")));
        }
        let spacing = 2.0 * half_extent / (points_per_axis - 1) as f64;
        let axis: Vec<f64> = (0..points_per_axis)
            .map(|k| {
                if k == points_per_axis - 1 {
                    half_extent
                } else {
                    -half_extent + k as f64 * spacing
                }
            })
            .collect();
        let axis_weight = |k: usize| {
            if k == 0 || k == points_per_axis - 1 {
                0.5 * spacing
            } else {
                spacing
            }
        };
        let len = points_per_axis.pow(dim as u32);
        let masses = (0..len)
            .map(|idx| {
                let mi = multi_index(idx, points_per_axis, dim);
                (0..dim).map(|d| axis_weight(mi[d])).product()
            })
            .collect();
        Ok(Grid { dim, half_extent, points_per_axis, spacing, axis, masses, truncation })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_extent(&self) -> f64 {
        self.half_extent
    }

    pub fn points_per_axis(&self) -> usize {
        self.points_per_axis
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn truncation(&self) -> Truncation {
        self.truncation
    }

    /// One-dimensional node coordinates shared by every axis.
    pub fn axis(&self) -> &[f64] {
        &self.axis
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// Volume of the truncation box.
    pub fn volume(&self) -> f64 {
        (2.0 * self.half_extent).powi(self.dim as i32)
    }

    pub fn multi_index(&self, idx: usize) -> [usize; 2] {
        multi_index(idx, self.points_per_axis, self.dim)
    }

    pub fn index(&self, mi: [usize; 2]) -> usize {
        if self.dim == 1 {
            mi[0]
        } else {
            mi[0] + self.points_per_axis * mi[1]
        }
    }

    /// Node coordinates; the second entry is zero when `dim == 1`.
    pub fn coords(&self, idx: usize) -> [f64; 2] {
        let mi = self.multi_index(idx);
        let mut x = [0.0; 2];
        for d in 0..self.dim {
            x[d] = self.axis[mi[d]];
        }
        x
    }

    /// True when the node lies on a face of the truncation box.
    pub fn on_boundary(&self, idx: usize) -> bool {
        let mi = self.multi_index(idx);
        (0..self.dim).any(|d| mi[d] == 0 || mi[d] == self.points_per_axis - 1)
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.coords(i), self.coords(j));
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }
}

fn multi_index(idx: usize, n: usize, dim: usize) -> [usize; 2] {
    if dim == 1 {
        [idx, 0]
    } else {
        [idx % n, idx / n]
    }
}

/// Axis-aligned region in physical coordinates.
#[derive(Clone, Debug, PartialEq)]
pub enum Region {
    /// Half-open box `[lower, upper)` per axis.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// Open ball `|x - center| < radius`.
    Ball { center: Vec<f64>, radius: f64 },
}

impl Region {
    pub fn interval(lower: f64, upper: f64) -> Self {
        Region::Box { lower: vec![lower], upper: vec![upper] }
    }

    pub fn ball(center: &[f64], radius: f64) -> Self {
        Region::Ball { center: center.to_vec(), radius }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::Box { lower, upper } => {
                x.iter().zip(lower).zip(upper).all(|((&xi, &lo), &hi)| xi >= lo && xi < hi)
            }
            Region::Ball { center, radius } => {
                let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum();
                r2 < radius * radius
            }
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        let ok = match self {
            Region::Box { lower, upper } => lower.len() == dim && upper.len() == dim,
            Region::Ball { center, radius } => center.len() == dim && *radius > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidPartition(format!("region {self:?} does not match dimension {dim}")))
        }
    }

    /// Grid nodes inside the region, ascending.
    pub fn select(&self, grid: &Grid) -> Vec<usize> {
        (0..grid.len())
            .filter(|&i| self.contains(&grid.coords(i)[..grid.dim()]))
            .collect()
    }
}

/// Interior domain, its exterior complement and the two exterior
/// control/measurement regions, as ascending node index lists.
#[derive(Clone, Debug)]
pub struct DomainPartition {
    interior: Vec<usize>,
    exterior: Vec<usize>,
    first_region: Vec<usize>,
    second_region: Vec<usize>,
    slot: Vec<Slot>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Interior(usize),
    Exterior(usize),
}

impl DomainPartition {
    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn exterior(&self) -> &[usize] {
        &self.exterior
    }

    /// First exterior region (controls, `O1`).
    pub fn first_region(&self) -> &[usize] {
        &self.first_region
    }

    /// Second exterior region (measurements, `O2`).
    pub fn second_region(&self) -> &[usize] {
        &self.second_region
    }

    pub fn len(&self) -> usize {
        self.slot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slot.is_empty()
    }

    pub fn is_interior(&self, node: usize) -> bool {
        matches!(self.slot[node], Slot::Interior(_))
    }

    /// Position of `node` in the interior list.
    pub fn interior_position(&self, node: usize) -> Option<usize> {
        match self.slot[node] {
            Slot::Interior(k) => Some(k),
            Slot::Exterior(_) => None,
        }
    }

    /// Position of `node` in the exterior list.
    pub fn exterior_position(&self, node: usize) -> Option<usize> {
        match self.slot[node] {
            Slot::Exterior(k) => Some(k),
            Slot::Interior(_) => None,
        }
    }

    /// Builds a partition from explicit node lists.
    pub fn from_nodes(grid: &Grid, interior: Vec<usize>, first: Vec<usize>, second: Vec<usize>) -> Result<Self> {
        let n = grid.len();
        let mut flag = vec![false; n];
        for &i in &interior {
            if i >= n {
                return Err(Error::InvalidPartition(format!("node {i} out of range")));
            }
            if grid.on_boundary(i) {
                return Err(Error::InvalidPartition(format!(
                    "interior node {i} lies on the truncation boundary"
                )));
            }
            flag[i] = true;
        }
        let mut interior: Vec<usize> = (0..n).filter(|&i| flag[i]).collect();
        interior.dedup();
        let exterior: Vec<usize> = (0..n).filter(|&i| !flag[i]).collect();
        if interior.is_empty() {
            return Err(Error::InvalidPartition("interior domain selects no nodes".into()));
        }
        if exterior.is_empty() {
            return Err(Error::InvalidPartition("exterior domain is empty".into()));
        }
        let mut slot = vec![Slot::Exterior(0); n];
        for (k, &i) in interior.iter().enumerate() {
            slot[i] = Slot::Interior(k);
        }
        for (k, &i) in exterior.iter().enumerate() {
            slot[i] = Slot::Exterior(k);
        }
        let clean = |mut v: Vec<usize>, name: &str| -> Result<Vec<usize>> {
            v.sort_unstable();
            v.dedup();
            if let Some(&bad) = v.iter().find(|&&i| i >= n || flag[i]) {
                return Err(Error::InvalidPartition(format!("{name} contains interior node {bad}")));
            }
            Ok(v)
        };
        let first_region = clean(first, "first region")?;
        let second_region = clean(second, "second region")?;
        Ok(DomainPartition { interior, exterior, first_region, second_region, slot })
    }
}

/// Partitions the grid into the interior domain and its exterior. The
/// interior must not touch the truncation boundary; the exterior regions
/// must be disjoint from the interior.
pub fn partition_domain(
    grid: &Grid,
    omega: &Region,
    first: Option<&Region>,
    second: Option<&Region>,
) -> Result<DomainPartition> {
    omega.check_dim(grid.dim())?;
    let interior = omega.select(grid);
    if interior.len() == grid.len() {
        return Err(Error::InvalidPartition("interior domain covers every node".into()));
    }
    let pick = |r: Option<&Region>| -> Result<Vec<usize>> {
        match r {
            Some(r) => {
                r.check_dim(grid.dim())?;
                Ok(r.select(grid))
            }
            None => Ok(Vec::new()),
        }
    };
    let first = pick(first)?;
    let second = pick(second)?;
    DomainPartition::from_nodes(grid, interior, first, second)
}

/// Scalar function of position.
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Matrix-valued function of position (the upper-left `n x n` block is used).
pub type MatrixFn = Arc<dyn Fn(&[f64]) -> Matrix2<f64> + Send + Sync>;

/// Description of the coefficient matrix `A(x)`.
#[derive(Clone)]
pub enum CoefficientSpec {
    Identity,
    /// One positive function per axis on the diagonal.
    Diagonal(Vec<ScalarFn>),
    /// Full symmetric matrix with a declared ellipticity bound.
    Full { entries: MatrixFn, declared_bound: f64 },
}

impl fmt::Debug for CoefficientSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoefficientSpec::Identity => f.write_str("Identity"),
            CoefficientSpec::Diagonal(v) => write!(f, "Diagonal({} entries)", v.len()),
            CoefficientSpec::Full { declared_bound, .. } => write!(f, "Full {{ declared_bound: {declared_bound} }}"),
        }
    }
}

impl CoefficientSpec {
    pub fn diagonal<F>(entries: Vec<F>) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        CoefficientSpec::Diagonal(entries.into_iter().map(|e| Arc::new(e) as ScalarFn).collect())
    }

    pub fn full<F>(entries: F, declared_bound: f64) -> Self
    where
        F: Fn(&[f64]) -> Matrix2<f64> + Send + Sync + 'static,
    {
        CoefficientSpec::Full { entries: Arc::new(entries), declared_bound }
    }
}

/// Per-node symmetric coefficient matrices with ellipticity bounds.
#[derive(Clone, Debug)]
pub struct CoefficientField {
    dim: usize,
    values: Vec<Matrix2<f64>>,
    lower: f64,
    upper: f64,
    ellipticity: f64,
    diagonal: bool,
}

impl CoefficientField {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Coefficient at node `i`; entries outside the `dim x dim` block are zero.
    pub fn at(&self, i: usize) -> &Matrix2<f64> {
        &self.values[i]
    }

    pub fn values(&self) -> &[Matrix2<f64>] {
        &self.values
    }

    /// Smallest eigenvalue over all nodes.
    pub fn lower_bound(&self) -> f64 {
        self.lower
    }

    /// Largest eigenvalue over all nodes.
    pub fn upper_bound(&self) -> f64 {
        self.upper
    }

    /// Global constant `Λ >= 1` with `Λ^{-1}|ξ|² <= ξᵀAξ <= Λ|ξ|²`.
    pub fn ellipticity(&self) -> f64 {
        self.ellipticity
    }

    /// True when every off-diagonal entry vanishes.
    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    /// Extended coefficient `diag(A(x_i), 1)` of size `(dim+1)²`, row-major.
    pub fn extended(&self, i: usize) -> Vec<f64> {
        let m = self.dim + 1;
        let mut out = vec![0.0; m * m];
        for r in 0..self.dim {
            for c in 0..self.dim {
                out[r * m + c] = self.values[i][(r, c)];
            }
        }
        out[m * m - 1] = 1.0;
        out
    }
}

fn node_spectrum(a: &Matrix2<f64>, dim: usize) -> (f64, f64) {
    if dim == 1 {
        (a[(0, 0)], a[(0, 0)])
    } else {
        let e = SymmetricEigen::new(*a).eigenvalues;
        (e.min(), e.max())
    }
}

/// Samples `A(x)` at every node, symmetrizes it and checks ellipticity.
pub fn sample_coefficient(grid: &Grid, spec: &CoefficientSpec) -> Result<CoefficientField> {
    let dim = grid.dim();
    let mut values = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let x = grid.coords(i);
        let x = &x[..dim];
        let mut a = Matrix2::zeros();
        match spec {
            CoefficientSpec::Identity => {
                for d in 0..dim {
                    a[(d, d)] = 1.0;
                }
            }
            CoefficientSpec::Diagonal(entries) => {
                if entries.len() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, found: entries.len() });
                }
                for d in 0..dim {
                    a[(d, d)] = entries[d](x);
                }
            }
            CoefficientSpec::Full { entries, .. } => {
                let raw = entries(x);
                for r in 0..dim {
                    for c in 0..dim {
                        a[(r, c)] = 0.5 * (raw[(r, c)] + raw[(c, r)]);
                    }
                }
            }
        }
        values.push(a);
    }
    let mut lower = f64::INFINITY;
    let mut upper = 0.0_f64;
    for (i, a) in values.iter().enumerate() {
        let (lo, hi) = node_spectrum(a, dim);
        if !(lo > 0.0) || !hi.is_finite() {
            return Err(Error::NotElliptic { node: i, eigenvalue: lo });
        }
        lower = lower.min(lo);
        upper = upper.max(hi);
    }
    let raw = upper.max(1.0 / lower);
    let mut ellipticity = (raw - 1e-12).ceil().max(1.0);
    if let CoefficientSpec::Full { declared_bound, .. } = spec {
        if raw > *declared_bound * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "declared ellipticity bound {declared_bound} is below the sampled bound {raw}"
            )));
        }
        ellipticity = declared_bound.max(1.0);
    }
    let diagonal = dim == 1 || values.iter().all(|a| a[(0, 1)] == 0.0);
    Ok(CoefficientField { dim, values, lower, upper, ellipticity, diagonal })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_point_line() {
        let g = Grid::build(1, 1.0, 3, Truncation::Reflecting).unwrap();
        assert_eq!(g.axis(), &[-1.0, 0.0, 1.0]);
        assert_eq!(g.spacing(), 1.0);
        assert_eq!(g.masses(), &[0.5, 1.0, 0.5]);
    }

    #[test]
    fn three_by_three_square() {
        let g = Grid::build(2, 1.0, 3, Truncation::Reflecting).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g.masses()[0], 0.25);
        assert_eq!(g.masses()[1], 0.5);
        assert_eq!(g.masses()[4], 1.0);
        assert_eq!(g.coords(5), [1.0, 0.0]);
    }

    #[test]
    fn total_mass_matches_box() {
        let g = Grid::build(1, 4.0, 129, Truncation::Reflecting).unwrap();
        assert!((g.total_mass() - 8.0).abs() <= 1e-12 * 8.0);
        for n in [3, 4, 17, 50] {
            let g = Grid::build(2, 1.3, n, Truncation::Absorbing).unwrap();
            assert!((g.total_mass() - g.volume()).abs() <= 1e-12 * g.volume());
        }
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::build(1, 1.0, 2, Truncation::Reflecting).is_err());
        assert!(Grid::build(1, 0.0, 9, Truncation::Reflecting).is_err());
        assert!(Grid::build(1, -1.0, 9, Truncation::Reflecting).is_err());
        assert!(Grid::build(3, 1.0, 9, Truncation::Reflecting).is_err());
    }

    #[test]
    fn partition_example() {
        let g = Grid::build(1, 1.0, 9, Truncation::Reflecting).unwrap();
        let p = partition_domain(
            &g,
            &Region::ball(&[0.0], 0.3),
            Some(&Region::interval(0.4, 0.9)),
            Some(&Region::interval(-0.9, -0.4)),
        )
        .unwrap();
        assert_eq!(p.interior(), &[3, 4, 5]);
        assert_eq!(p.exterior(), &[0, 1, 2, 6, 7, 8]);
        assert_eq!(p.first_region(), &[6, 7]);
        assert_eq!(p.second_region(), &[1, 2]);
        assert_eq!(p.interior_position(4), Some(1));
        assert_eq!(p.exterior_position(6), Some(3));
    }

    #[test]
    fn partition_rejects_degenerate_domains() {
        let g = Grid::build(1, 1.0, 9, Truncation::Reflecting).unwrap();
        assert!(partition_domain(&g, &Region::ball(&[0.0], 5.0), None, None).is_err());
        assert!(partition_domain(&g, &Region::ball(&[0.1], 0.01), None, None).is_err());
        // touches the truncation boundary
        assert!(partition_domain(&g, &Region::interval(0.5, 1.5), None, None).is_err());
        // control region overlapping the interior
        assert!(partition_domain(&g, &Region::ball(&[0.0], 0.3), Some(&Region::interval(0.0, 0.6)), None).is_err());
    }

    #[test]
    fn sine_coefficient_bounds() {
        let g = Grid::build(1, 1.0, 9, Truncation::Reflecting).unwrap();
        let spec = CoefficientSpec::diagonal(vec![|x: &[f64]| 2.0 + (std::f64::consts::PI * x[0]).sin()]);
        let c = sample_coefficient(&g, &spec).unwrap();
        assert!((c.upper_bound() - 3.0).abs() < 1e-12);
        assert!((c.lower_bound() - 1.0).abs() < 1e-12);
        assert_eq!(c.ellipticity(), 3.0);
    }

    #[test]
    fn identity_coefficient() {
        let g = Grid::build(2, 1.0, 5, Truncation::Reflecting).unwrap();
        let c = sample_coefficient(&g, &CoefficientSpec::Identity).unwrap();
        assert_eq!(c.ellipticity(), 1.0);
        assert!(c.is_diagonal());
        assert_eq!(c.extended(3), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_negative_definite_node() {
        let g = Grid::build(2, 1.0, 5, Truncation::Reflecting).unwrap();
        let spec = CoefficientSpec::full(
            |x: &[f64]| {
                if x[0] > 0.6 && x[1] > 0.6 {
                    -Matrix2::identity()
                } else {
                    Matrix2::new(2.0, 0.5, 0.5, 1.0)
                }
            },
            4.0,
        );
        assert!(matches!(sample_coefficient(&g, &spec), Err(Error::NotElliptic { .. })));
    }
}
