//! Exterior-value Dirichlet problem for `L^s + q`, the eigenvalue condition,
//! the Dirichlet-to-Neumann map in its two representations, the nonlocal
//! Neumann operator and the integral identity.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::assembly::mat_vec;
use crate::error::{Error, Result};
use crate::grid::{DomainPartition, Grid};
use crate::spectral::FractionalOperator;

/// Condition-number threshold above which the interior block is treated
/// as singular (zero is then a Dirichlet eigenvalue).
pub const SINGULAR_CONDITION: f64 = 1e14;

/// Potential `q` on the interior nodes, in partition order.
#[derive(Clone, Debug, PartialEq)]
pub struct Potential {
    values: Vec<f64>,
}

impl Potential {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("potential value {v} is not finite")));
        }
        Ok(Potential { values })
    }

    pub fn zero(partition: &DomainPartition) -> Self {
        Potential { values: vec![0.0; partition.interior().len()] }
    }

    pub fn constant(partition: &DomainPartition, c: f64) -> Self {
        Potential { values: vec![c; partition.interior().len()] }
    }

    /// Samples `f` at the interior nodes.
    pub fn from_fn<F: Fn(&[f64]) -> f64>(grid: &Grid, partition: &DomainPartition, f: F) -> Self {
        let values = partition
            .interior()
            .iter()
            .map(|&i| f(&grid.coords(i)[..grid.dim()]))
            .collect();
        Potential { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Zero extension to the full grid.
    pub fn extended(&self, partition: &DomainPartition) -> Vec<f64> {
        let mut out = vec![0.0; partition.len()];
        for (&i, &q) in partition.interior().iter().zip(&self.values) {
            out[i] = q;
        }
        out
    }

    pub fn shifted(&self, c: f64) -> Self {
        Potential { values: self.values.iter().map(|v| v + c).collect() }
    }

    pub fn difference(&self, other: &Potential) -> Vec<f64> {
        self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect()
    }
}

/// Solution of `(L^s + q) u = f` in the interior with `u = g` outside.
#[derive(Clone, Debug)]
pub struct ForwardSolution {
    pub u: Vec<f64>,
    pub datum: Vec<f64>,
    pub residual: f64,
}

impl ForwardSolution {
    /// Interior values in partition order.
    pub fn interior_values(&self, partition: &DomainPartition) -> Vec<f64> {
        partition.interior().iter().map(|&i| self.u[i]).collect()
    }
}

/// `B_q(v, w) = ⟨S v, w⟩_M + Σ_{Ω} q v w m`.
pub fn bilinear_form(frac: &FractionalOperator, q: &Potential, partition: &DomainPartition, v: &[f64], w: &[f64]) -> f64 {
    let m = frac.masses();
    let local: f64 = partition
        .interior()
        .iter()
        .zip(q.values())
        .map(|(&i, &qi)| qi * v[i] * w[i] * m[i])
        .sum();
    frac.pairing(v, w) + local
}

/// Factorized interior block `(M(S+Q))_{ΩΩ}`, symmetric.
#[derive(Clone, Debug)]
pub(crate) struct InteriorSystem {
    block: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    pub(crate) condition: f64,
}

impl InteriorSystem {
    pub(crate) fn new(frac: &FractionalOperator, q: &Potential, partition: &DomainPartition) -> Result<Self> {
        let interior = partition.interior();
        if q.len() != interior.len() {
            return Err(Error::DimensionMismatch { expected: interior.len(), found: q.len() });
        }
        let w = frac.weighted();
        let m = frac.masses();
        let k = interior.len();
        let mut block = DMatrix::<f64>::zeros(k, k);
        for (b, &j) in interior.iter().enumerate() {
            for (a, &i) in interior.iter().enumerate() {
                block[(a, b)] = w[(i, j)];
            }
            block[(b, b)] += q.values()[b] * m[j];
        }
        let mut scaled = block.clone();
        for b in 0..k {
            for a in 0..k {
                scaled[(a, b)] /= (m[interior[a]] * m[interior[b]]).sqrt();
            }
        }
        let eig = SymmetricEigen::new(scaled).eigenvalues;
        let big = eig.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let small = eig.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
        let condition = if small == 0.0 { f64::INFINITY } else { big / small };
        if !(condition <= SINGULAR_CONDITION) {
            return Err(Error::NearSingular { condition });
        }
        let lu = block.clone().lu();
        Ok(InteriorSystem { block, lu, condition })
    }

    /// Solves with one step of iterative refinement.
    pub(crate) fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = self.lu.solve(rhs).expect("interior block passed the condition check");
        let r = rhs - &self.block * &x;
        if let Some(dx) = self.lu.solve(&r) {
            x += dx;
        }
        x
    }

    pub(crate) fn residual(&self, x: &DMatrix<f64>, rhs: &DMatrix<f64>) -> f64 {
        let r = rhs - &self.block * x;
        let scale = rhs.norm().max(self.block.norm() * x.norm());
        if scale == 0.0 {
            0.0
        } else {
            r.norm() / scale
        }
    }

    /// Interior response `-A⁻¹ (MS)_{Ω,nodes}` to unit exterior values on `nodes`.
    pub(crate) fn response(&self, frac: &FractionalOperator, partition: &DomainPartition, nodes: &[usize]) -> DMatrix<f64> {
        let w = frac.weighted();
        let interior = partition.interior();
        let mut rhs = DMatrix::<f64>::zeros(interior.len(), nodes.len());
        for (b, &j) in nodes.iter().enumerate() {
            for (a, &i) in interior.iter().enumerate() {
                rhs[(a, b)] = -w[(i, j)];
            }
        }
        self.solve(&rhs)
    }
}

/// Solves the exterior-value problem. `datum` lives on the exterior nodes
/// (partition order), `source` on the interior nodes (may be `None` for zero).
pub fn solve_dirichlet(
    frac: &FractionalOperator,
    q: &Potential,
    partition: &DomainPartition,
    datum: &[f64],
    source: Option<&[f64]>,
) -> Result<ForwardSolution> {
    let system = InteriorSystem::new(frac, q, partition)?;
    solve_with(&system, frac, partition, datum, source)
}

pub(crate) fn solve_with(
    system: &InteriorSystem,
    frac: &FractionalOperator,
    partition: &DomainPartition,
    datum: &[f64],
    source: Option<&[f64]>,
) -> Result<ForwardSolution> {
    let interior = partition.interior();
    let exterior = partition.exterior();
    if datum.len() != exterior.len() {
        return Err(Error::DimensionMismatch { expected: exterior.len(), found: datum.len() });
    }
    let m = frac.masses();
    let w = frac.weighted();
    let mut rhs = DMatrix::<f64>::zeros(interior.len(), 1);
    if let Some(f) = source {
        if f.len() != interior.len() {
            return Err(Error::DimensionMismatch { expected: interior.len(), found: f.len() });
        }
        for (a, &i) in interior.iter().enumerate() {
            rhs[(a, 0)] = f[a] * m[i];
        }
    }
    for (b, &j) in exterior.iter().enumerate() {
        if datum[b] == 0.0 {
            continue;
        }
        for (a, &i) in interior.iter().enumerate() {
            rhs[(a, 0)] -= w[(i, j)] * datum[b];
        }
    }
    let x = system.solve(&rhs);
    let residual = system.residual(&x, &rhs);
    let mut u = vec![0.0; partition.len()];
    for (b, &j) in exterior.iter().enumerate() {
        u[j] = datum[b];
    }
    for (a, &i) in interior.iter().enumerate() {
        u[i] = x[(a, 0)];
    }
    Ok(ForwardSolution { u, datum: datum.to_vec(), residual })
}

/// Lowest eigenvalues of the pencil `((S+Q)_{ΩΩ}, M_{ΩΩ})`.
#[derive(Clone, Debug)]
pub struct EigenvalueReport {
    pub eigenvalues: Vec<f64>,
    pub zero_is_eigenvalue: bool,
    pub tolerance: f64,
}

/// Reports the lowest (up to ten) Dirichlet eigenvalues of `L^s + q` on the
/// interior. `tol` defaults to `1e-8·λ_max`.
pub fn eigenvalue_report(
    frac: &FractionalOperator,
    q: &Potential,
    partition: &DomainPartition,
    tol: Option<f64>,
) -> Result<EigenvalueReport> {
    let all = pencil_eigenvalues(frac, q, partition)?;
    let lmax = all.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let tolerance = tol.unwrap_or(1e-8 * lmax);
    let zero_is_eigenvalue = all.iter().any(|v| v.abs() < tolerance);
    let eigenvalues = all.into_iter().take(10).collect();
    Ok(EigenvalueReport { eigenvalues, zero_is_eigenvalue, tolerance })
}

/// All pencil eigenvalues, ascending.
pub fn pencil_eigenvalues(frac: &FractionalOperator, q: &Potential, partition: &DomainPartition) -> Result<Vec<f64>> {
    let interior = partition.interior();
    if q.len() != interior.len() {
        return Err(Error::DimensionMismatch { expected: interior.len(), found: q.len() });
    }
    let w = frac.weighted();
    let m = frac.masses();
    let k = interior.len();
    let mut a = DMatrix::<f64>::zeros(k, k);
    for (b, &j) in interior.iter().enumerate() {
        for (r, &i) in interior.iter().enumerate() {
            a[(r, b)] = w[(i, j)] / (m[i] * m[j]).sqrt();
        }
        a[(b, b)] += q.values()[b];
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(a).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Exterior-to-exterior DN map with the mass pairing
/// `⟨Λg, h⟩ = Σ_{Ω_e} (Λg)_i h_i m_i`.
#[derive(Clone, Debug)]
pub struct DnMap {
    matrix: DMatrix<f64>,
    response: DMatrix<f64>,
    exterior_masses: Vec<f64>,
    potential: Potential,
    s: f64,
    condition: f64,
}

impl DnMap {
    /// `Λ`, columns indexed by exterior basis vectors.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Interior values of the solutions for each exterior basis datum
    /// (the Poisson operator restricted to the interior).
    pub fn response(&self) -> &DMatrix<f64> {
        &self.response
    }

    pub fn exterior_masses(&self) -> &[f64] {
        &self.exterior_masses
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        mat_vec(&self.matrix, g)
    }

    pub fn pairing(&self, g: &[f64], h: &[f64]) -> f64 {
        self.apply(g).iter().zip(h).zip(&self.exterior_masses).map(|((a, b), m)| a * b * m).sum()
    }

    /// Relative violation of `⟨Λg,h⟩ = ⟨Λh,g⟩`.
    pub fn symmetry_defect(&self, g: &[f64], h: &[f64]) -> f64 {
        let a = self.pairing(g, h);
        let b = self.pairing(h, g);
        let scale = exterior_norm(&self.apply(g), &self.exterior_masses) * exterior_norm(h, &self.exterior_masses);
        if scale == 0.0 {
            (a - b).abs()
        } else {
            (a - b).abs() / scale
        }
    }
}

fn exterior_norm(v: &[f64], m: &[f64]) -> f64 {
    v.iter().zip(m).map(|(a, b)| a * a * b).sum::<f64>().sqrt()
}

/// Assembles `Λ_q` column by column, `Λ_q e = (S u_e)|_{Ω_e}`.
pub fn assemble_dn_map(frac: &FractionalOperator, q: &Potential, partition: &DomainPartition) -> Result<DnMap> {
    let system = InteriorSystem::new(frac, q, partition)?;
    let exterior = partition.exterior();
    let interior = partition.interior();
    let response = system.response(frac, partition, exterior);
    let s_mat = frac.matrix();
    let ne = exterior.len();
    let mut matrix = DMatrix::<f64>::zeros(ne, ne);
    for (b, &j) in exterior.iter().enumerate() {
        for (a, &i) in exterior.iter().enumerate() {
            let mut v = s_mat[(i, j)];
            for (k, &l) in interior.iter().enumerate() {
                v += s_mat[(i, l)] * response[(k, b)];
            }
            matrix[(a, b)] = v;
        }
    }
    let m = frac.masses();
    Ok(DnMap {
        matrix,
        response,
        exterior_masses: exterior.iter().map(|&i| m[i]).collect(),
        potential: q.clone(),
        s: frac.s(),
        condition: system.condition,
    })
}

/// `⟨Λg, h⟩` computed through the bilinear form, `B_q(u_g, u_h)`.
pub fn dn_pairing_via_form(
    frac: &FractionalOperator,
    q: &Potential,
    partition: &DomainPartition,
    g: &[f64],
    h: &[f64],
) -> Result<f64> {
    let system = InteriorSystem::new(frac, q, partition)?;
    let ug = solve_with(&system, frac, partition, g, None)?;
    let uh = solve_with(&system, frac, partition, h, None)?;
    Ok(bilinear_form(frac, q, partition, &ug.u, &uh.u))
}

/// Pieces of the Neumann-operator representation of the DN map.
#[derive(Clone, Debug)]
pub struct NeumannRepresentation {
    /// `(N_s u)_i = Σ_{j∈Ω} K̂_ij (u_i - u_j) m_j` on exterior nodes.
    pub neumann: Vec<f64>,
    /// `m_Ω(i) = Σ_{j∈Ω} K̂_ij m_j`.
    pub weight: Vec<f64>,
    /// `(S E₀ g)|_{Ω_e}` with `E₀` the zero extension.
    pub zero_extension_term: Vec<f64>,
    /// `N_s u - m_Ω g + S E₀ g` on the exterior.
    pub dn: Vec<f64>,
}

/// Evaluates `Λ_q g = (N_s u_g - m g + L^s(E₀ g))|_{Ω_e}` from a forward solution.
pub fn dn_via_neumann(
    frac: &FractionalOperator,
    partition: &DomainPartition,
    solution: &ForwardSolution,
    g: &[f64],
) -> Result<NeumannRepresentation> {
    let exterior = partition.exterior();
    let interior = partition.interior();
    if g.len() != exterior.len() {
        return Err(Error::DimensionMismatch { expected: exterior.len(), found: g.len() });
    }
    let k = frac.kernel();
    let m = frac.masses();
    let u = &solution.u;
    let mut zero_ext = vec![0.0; partition.len()];
    for (b, &j) in exterior.iter().enumerate() {
        zero_ext[j] = g[b];
    }
    let s_e0 = frac.apply(&zero_ext);
    let mut neumann = Vec::with_capacity(exterior.len());
    let mut weight = Vec::with_capacity(exterior.len());
    let mut zero_extension_term = Vec::with_capacity(exterior.len());
    let mut dn = Vec::with_capacity(exterior.len());
    for (b, &i) in exterior.iter().enumerate() {
        let mut n_i = 0.0;
        let mut w_i = 0.0;
        for &j in interior {
            n_i += k[(i, j)] * (u[i] - u[j]) * m[j];
            w_i += k[(i, j)] * m[j];
        }
        neumann.push(n_i);
        weight.push(w_i);
        zero_extension_term.push(s_e0[i]);
        dn.push(n_i - w_i * g[b] + s_e0[i]);
    }
    Ok(NeumannRepresentation { neumann, weight, zero_extension_term, dn })
}

/// Both sides of the integral identity
/// `⟨(Λ_{q1} - Λ_{q2}) g1, g2⟩ = Σ_Ω (q1 - q2) u1 u2 m`.
#[derive(Clone, Copy, Debug)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub scale: f64,
    pub residual: f64,
}

/// Evaluates the integral identity with independent solves for each side.
pub fn integral_identity_residual(
    frac: &FractionalOperator,
    q1: &Potential,
    q2: &Potential,
    partition: &DomainPartition,
    g1: &[f64],
    g2: &[f64],
) -> Result<IdentityCheck> {
    let sys1 = InteriorSystem::new(frac, q1, partition)?;
    let sys2 = InteriorSystem::new(frac, q2, partition)?;
    let u1 = solve_with(&sys1, frac, partition, g1, None)?;
    let u2 = solve_with(&sys2, frac, partition, g2, None)?;
    let u21 = solve_with(&sys2, frac, partition, g1, None)?;
    let exterior = partition.exterior();
    let m = frac.masses();
    let s1 = frac.apply(&u1.u);
    let s21 = frac.apply(&u21.u);
    let mut lhs = 0.0;
    let mut norm_a = 0.0;
    let mut norm_g = 0.0;
    for (b, &i) in exterior.iter().enumerate() {
        lhs += (s1[i] - s21[i]) * g2[b] * m[i];
        norm_a += (s1[i].powi(2) + s21[i].powi(2)) * m[i];
        norm_g += g2[b] * g2[b] * m[i];
    }
    let rhs: f64 = partition
        .interior()
        .iter()
        .zip(q1.values().iter().zip(q2.values()))
        .map(|(&i, (a, b))| (a - b) * u1.u[i] * u2.u[i] * m[i])
        .sum();
    let scale = (norm_a * norm_g).sqrt();
    let residual = if scale == 0.0 { (lhs - rhs).abs() } else { (lhs - rhs).abs() / scale };
    Ok(IdentityCheck { lhs, rhs, scale, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::assemble_local_operator;
    use crate::grid::{partition_domain, sample_coefficient, CoefficientSpec, Region, Truncation};
    use crate::spectral::{eigendecompose, fractional_power};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Setup {
        grid: Grid,
        part: DomainPartition,
        frac: FractionalOperator,
    }

    fn setup(n: usize, s: f64) -> Setup {
        let grid = Grid::build(1, 2.0, n, Truncation::Reflecting).unwrap();
        let spec = CoefficientSpec::diagonal(vec![|x: &[f64]| 1.5 + 0.5 * (x[0]).cos()]);
        let c = sample_coefficient(&grid, &spec).unwrap();
        let op = assemble_local_operator(&grid, &c).unwrap();
        let d = eigendecompose(&op).unwrap();
        let frac = fractional_power(&d, s).unwrap();
        let part = partition_domain(
            &grid,
            &Region::ball(&[0.0], 0.5),
            Some(&Region::interval(0.7, 1.5)),
            Some(&Region::interval(-1.5, -0.7)),
        )
        .unwrap();
        Setup { grid, part, frac }
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn form_is_symmetric_and_matches_dirichlet_energy() {
        let st = setup(33, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = Potential::new(random(&mut rng, st.part.interior().len())).unwrap();
        let v = random(&mut rng, st.grid.len());
        let w = random(&mut rng, st.grid.len());
        let a = bilinear_form(&st.frac, &q, &st.part, &v, &w);
        let b = bilinear_form(&st.frac, &q, &st.part, &w, &v);
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        let zero = Potential::zero(&st.part);
        let e = bilinear_form(&st.frac, &zero, &st.part, &v, &v);
        let d = st.frac.dirichlet_form(&v, &v);
        assert!(e > 0.0);
        assert!((e - d).abs() < 1e-10 * e);
        let ones = vec![1.0; st.grid.len()];
        assert!(bilinear_form(&st.frac, &zero, &st.part, &ones, &ones).abs() < 1e-10);
    }

    #[test]
    fn zero_data_give_zero_solution() {
        let st = setup(33, 0.5);
        let q = Potential::constant(&st.part, 2.0);
        let sol = solve_dirichlet(&st.frac, &q, &st.part, &vec![0.0; st.part.exterior().len()], None).unwrap();
        assert!(sol.u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn solution_keeps_exterior_datum_and_solves_interior() {
        let st = setup(33, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Potential::new(random(&mut rng, st.part.interior().len()).iter().map(|v| v.abs()).collect()).unwrap();
        let g = random(&mut rng, st.part.exterior().len());
        let f = random(&mut rng, st.part.interior().len());
        let sol = solve_dirichlet(&st.frac, &q, &st.part, &g, Some(&f)).unwrap();
        for (b, &j) in st.part.exterior().iter().enumerate() {
            assert_eq!(sol.u[j], g[b]);
        }
        let su = st.frac.apply(&sol.u);
        for (a, &i) in st.part.interior().iter().enumerate() {
            assert!((su[i] + q.values()[a] * sol.u[i] - f[a]).abs() < 1e-9);
        }
        assert!(sol.residual < 1e-12);
    }

    #[test]
    fn eigenvalue_report_shift_and_singularity() {
        let st = setup(33, 0.5);
        let zero = Potential::zero(&st.part);
        let rep = eigenvalue_report(&st.frac, &zero, &st.part, None).unwrap();
        assert!(rep.eigenvalues.iter().all(|&v| v > 0.0));
        assert!(!rep.zero_is_eigenvalue);
        let shifted = eigenvalue_report(&st.frac, &zero.shifted(5.0), &st.part, None).unwrap();
        for (a, b) in rep.eigenvalues.iter().zip(&shifted.eigenvalues) {
            assert!((b - a - 5.0).abs() < 1e-10);
        }
        let critical = zero.shifted(-rep.eigenvalues[0]);
        let crit = eigenvalue_report(&st.frac, &critical, &st.part, None).unwrap();
        assert!(crit.zero_is_eigenvalue);
        let g = vec![1.0; st.part.exterior().len()];
        assert!(matches!(
            solve_dirichlet(&st.frac, &critical, &st.part, &g, None),
            Err(Error::NearSingular { .. })
        ));
    }

    #[test]
    fn dn_map_symmetry_and_both_routes() {
        let st = setup(33, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = Potential::new(random(&mut rng, st.part.interior().len())).unwrap();
        let dn = assemble_dn_map(&st.frac, &q, &st.part).unwrap();
        let ne = st.part.exterior().len();
        for _ in 0..20 {
            let g = random(&mut rng, ne);
            let h = random(&mut rng, ne);
            assert!(dn.symmetry_defect(&g, &h) < 1e-10);
            let via_form = dn_pairing_via_form(&st.frac, &q, &st.part, &g, &h).unwrap();
            let direct = dn.pairing(&g, &h);
            assert!((via_form - direct).abs() < 1e-10 * direct.abs().max(1.0));
        }
        let again = assemble_dn_map(&st.frac, &q, &st.part).unwrap();
        assert_eq!(dn.matrix(), again.matrix());
    }

    #[test]
    fn neumann_representation_matches_columns() {
        let st = setup(33, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Potential::new(random(&mut rng, st.part.interior().len()).iter().map(|v| v + 1.0).collect()).unwrap();
        let dn = assemble_dn_map(&st.frac, &q, &st.part).unwrap();
        let ne = st.part.exterior().len();
        for _ in 0..10 {
            let g = random(&mut rng, ne);
            let sol = solve_dirichlet(&st.frac, &q, &st.part, &g, None).unwrap();
            let rep = dn_via_neumann(&st.frac, &st.part, &sol, &g).unwrap();
            let direct = dn.apply(&g);
            let err: f64 = rep.dn.iter().zip(&direct).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = direct.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(err < 1e-10 * norm);
            assert!(rep.weight.iter().all(|&w| w > 0.0));
        }
        let zero = vec![0.0; ne];
        let sol = solve_dirichlet(&st.frac, &q, &st.part, &zero, None).unwrap();
        let rep = dn_via_neumann(&st.frac, &st.part, &sol, &zero).unwrap();
        assert!(rep.dn.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constants_have_zero_flux() {
        let st = setup(33, 0.5);
        let zero = Potential::zero(&st.part);
        let ones = vec![1.0; st.part.exterior().len()];
        let sol = solve_dirichlet(&st.frac, &zero, &st.part, &ones, None).unwrap();
        assert!(sol.u.iter().all(|v| (v - 1.0).abs() < 1e-10));
        let rep = dn_via_neumann(&st.frac, &st.part, &sol, &ones).unwrap();
        assert!(rep.dn.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn integral_identity_holds() {
        let st = setup(33, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ni = st.part.interior().len();
        let ne = st.part.exterior().len();
        let q1 = Potential::new(random(&mut rng, ni)).unwrap();
        let same = integral_identity_residual(&st.frac, &q1, &q1, &st.part, &random(&mut rng, ne), &random(&mut rng, ne)).unwrap();
        assert!(same.residual <= 1e-12);
        for _ in 0..10 {
            let q2 = Potential::new(random(&mut rng, ni)).unwrap();
            let chk = integral_identity_residual(&st.frac, &q1, &q2, &st.part, &random(&mut rng, ne), &random(&mut rng, ne)).unwrap();
            assert!(chk.residual < 1e-9, "{chk:?}");
        }
    }
}
