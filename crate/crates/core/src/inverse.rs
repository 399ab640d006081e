//! Runge approximation, the Poisson operator `P_q`, moment extraction through
//! the integral identity, and Gauss-Newton reconstruction of `q` from DN data.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{DomainPartition, Grid};
use crate::nonlocal::{assemble_dn_map, solve_with, DnMap, ForwardSolution, InteriorSystem, Potential};
use crate::spectral::FractionalOperator;

/// Gram condition number above which a Runge solve is flagged.
pub const GRAM_CONDITION_LIMIT: f64 = 1e14;

/// `u = P_q f`: the solution with exterior datum `f` (exterior order) and no source.
pub fn poisson_operator(
    frac: &FractionalOperator,
    q: &Potential,
    partition: &DomainPartition,
    datum: &[f64],
) -> Result<ForwardSolution> {
    crate::nonlocal::solve_dirichlet(frac, q, partition, datum, None)
}

/// Tikhonov-regularized control on `O` whose solution approximates a target in `Ω`.
#[derive(Clone, Debug)]
pub struct RungeResult {
    /// Control values on the nodes of `O`, in the order given.
    pub control: Vec<f64>,
    /// Control as an exterior datum (zero off `O`).
    pub datum: Vec<f64>,
    /// Interior trace `r_Ω P_q f`.
    pub achieved: Vec<f64>,
    /// `‖r_Ω P_q f - target‖_{M,Ω}`.
    pub error: f64,
    pub relative_error: f64,
    pub alpha: f64,
    /// Condition number of the regularized Gram matrix `BᵀB + α`.
    pub gram_condition: f64,
    pub warning: Option<String>,
}

/// Precomputed control-to-trace map for repeated Runge solves on one `O`.
#[derive(Clone, Debug)]
pub struct RungeSolver {
    nodes: Vec<usize>,
    exterior_slots: Vec<usize>,
    exterior_len: usize,
    response: DMatrix<f64>,
    interior_root: Vec<f64>,
    control_root: Vec<f64>,
    u: DMatrix<f64>,
    sigma: DVector<f64>,
    v_t: DMatrix<f64>,
}

impl RungeSolver {
    /// `control` lists grid nodes of `O`, all exterior.
    pub fn new(frac: &FractionalOperator, q: &Potential, partition: &DomainPartition, control: &[usize]) -> Result<Self> {
        if control.is_empty() {
            return Err(Error::InvalidPartition("control set O is empty".into()));
        }
        let exterior_slots = control
            .iter()
            .map(|&i| {
                partition
                    .exterior_position(i)
                    .ok_or_else(|| Error::InvalidPartition(format!("control node {i} is not exterior")))
            })
            .collect::<Result<Vec<_>>>()?;
        let system = InteriorSystem::new(frac, q, partition)?;
        let response = system.response(frac, partition, control);
        let m = frac.masses();
        let interior_root: Vec<f64> = partition.interior().iter().map(|&i| m[i].sqrt()).collect();
        let control_root: Vec<f64> = control.iter().map(|&i| m[i].sqrt()).collect();
        let mut b = response.clone();
        for c in 0..b.ncols() {
            for r in 0..b.nrows() {
                b[(r, c)] *= interior_root[r] / control_root[c];
            }
        }
        let svd = b.svd(true, true);
        Ok(RungeSolver {
            nodes: control.to_vec(),
            exterior_slots,
            exterior_len: partition.exterior().len(),
            response,
            interior_root,
            control_root,
            u: svd.u.expect("left singular vectors requested"),
            sigma: svd.singular_values,
            v_t: svd.v_t.expect("right singular vectors requested"),
        })
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// Singular values of the weighted control-to-trace map.
    pub fn singular_values(&self) -> &DVector<f64> {
        &self.sigma
    }

    pub fn solve(&self, target: &[f64], alpha: f64) -> Result<RungeResult> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidParameter(format!("regularization must be positive, got {alpha}")));
        }
        let k = self.interior_root.len();
        if target.len() != k {
            return Err(Error::DimensionMismatch { expected: k, found: target.len() });
        }
        let b = DVector::from_iterator(k, target.iter().zip(&self.interior_root).map(|(t, r)| t * r));
        let proj = self.u.transpose() * &b;
        let filt = DVector::from_iterator(
            self.sigma.len(),
            self.sigma.iter().zip(proj.iter()).map(|(&s, &p)| s / (s * s + alpha) * p),
        );
        let phi = self.v_t.transpose() * filt;
        let control: Vec<f64> = phi.iter().zip(&self.control_root).map(|(p, r)| p / r).collect();
        let achieved: Vec<f64> = (&self.response * DVector::from_column_slice(&control)).iter().copied().collect();
        let (mut err2, mut norm2) = (0.0, 0.0);
        for ((a, t), r) in achieved.iter().zip(target).zip(&self.interior_root) {
            err2 += (a - t).powi(2) * r * r;
            norm2 += t * t * r * r;
        }
        let error = err2.sqrt();
        let relative_error = if norm2 > 0.0 { error / norm2.sqrt() } else { error };
        let smax = self.sigma.max();
        // singular values beyond the rank of a wide map count as zero
        let smin = if self.nodes.len() > self.sigma.len() { 0.0 } else { self.sigma.min() };
        let gram_condition = (smax * smax + alpha) / (smin * smin + alpha);
        let warning = (gram_condition > GRAM_CONDITION_LIMIT).then(|| {
            format!("Gram condition {gram_condition:.3e} exceeds {GRAM_CONDITION_LIMIT:e}; alpha {alpha:e} is too small for this grid")
        });
        let mut datum = vec![0.0; self.exterior_len];
        for (&slot, &c) in self.exterior_slots.iter().zip(&control) {
            datum[slot] = c;
        }
        Ok(RungeResult { control, datum, achieved, error, relative_error, alpha, gram_condition, warning })
    }
}

/// One-shot Runge solve.
pub fn runge_approximate(
    frac: &FractionalOperator,
    q: &Potential,
    partition: &DomainPartition,
    control: &[usize],
    target: &[f64],
    alpha: f64,
) -> Result<RungeResult> {
    RungeSolver::new(frac, q, partition, control)?.solve(target, alpha)
}

/// Indicator functions of `count` contiguous chunks of the interior nodes,
/// each normalized to unit `M_Ω` norm.
pub fn indicator_probes(frac: &FractionalOperator, partition: &DomainPartition, count: usize) -> Result<Vec<Vec<f64>>> {
    let interior = partition.interior();
    let k = interior.len();
    if count == 0 || count > k {
        return Err(Error::InvalidParameter(format!("probe count must lie in 1..={k}, got {count}")));
    }
    let m = frac.masses();
    Ok((0..count)
        .map(|c| {
            let (lo, hi) = (c * k / count, (c + 1) * k / count);
            let norm = interior[lo..hi].iter().map(|&i| m[i]).sum::<f64>().sqrt();
            (0..k).map(|a| if a >= lo && a < hi { 1.0 / norm } else { 0.0 }).collect()
        })
        .collect())
}

/// Which potentials build the Runge controls.
#[derive(Clone, Debug, PartialEq)]
pub enum MomentMode {
    /// Controls built from `q1` and `q2` themselves.
    Exact,
    /// Both controls built from a reference potential (Born-approximate).
    Born(Potential),
}

/// Moments of `q1 - q2` against the probe family.
#[derive(Clone, Debug)]
pub struct MomentSet {
    /// `μ_k = ⟨(Λ_{q1} - Λ_{q2}) g1, g2⟩`.
    pub mu: Vec<f64>,
    /// `Σ_Ω (q1 - q2) u1 u2 m` with the achieved solutions.
    pub identity: Vec<f64>,
    /// `Σ_Ω (q1 - q2) f_k m`.
    pub target: Vec<f64>,
    /// `‖q1 - q2‖_∞ (‖u1 - f‖‖u2‖ + ‖f‖‖u2 - 1‖)`.
    pub budget: Vec<f64>,
    /// Relative Runge errors of the first control per probe.
    pub probe_errors: Vec<f64>,
    /// Relative Runge error of the second control.
    pub unit_error: f64,
    /// Scale `Σ |⟨Λ_{q1} g1, g2⟩| + |⟨Λ_{q2} g1, g2⟩|` for tolerance checks.
    pub scale: Vec<f64>,
    pub first_controls: Vec<Vec<f64>>,
    pub second_control: Vec<f64>,
}

impl MomentSet {
    /// Largest `|μ_k - identity_k| / scale_k`.
    pub fn consistency(&self) -> f64 {
        self.mu
            .iter()
            .zip(&self.identity)
            .zip(&self.scale)
            .map(|((a, b), s)| if *s > 0.0 { (a - b).abs() / s } else { (a - b).abs() })
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.mu.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Extracts moments with controls on the first (for `g1`) and second (for
/// `g2`) exterior regions of the partition.
pub fn extract_moments(
    frac: &FractionalOperator,
    partition: &DomainPartition,
    q1: &Potential,
    q2: &Potential,
    probes: &[Vec<f64>],
    alpha: f64,
    mode: &MomentMode,
) -> Result<MomentSet> {
    let (o1, o2) = (partition.first_region(), partition.second_region());
    if o1.is_empty() || o2.is_empty() {
        return Err(Error::InvalidPartition("moment extraction needs both control regions".into()));
    }
    let (c1, c2) = match mode {
        MomentMode::Exact => (q1, q2),
        MomentMode::Born(r) => (r, r),
    };
    let k = partition.interior().len();
    let runge1 = RungeSolver::new(frac, c1, partition, o1)?;
    let runge2 = RungeSolver::new(frac, c2, partition, o2)?;
    let ones = vec![1.0; k];
    let second = runge2.solve(&ones, alpha)?;
    let sys1 = InteriorSystem::new(frac, q1, partition)?;
    let sys2 = InteriorSystem::new(frac, q2, partition)?;
    let u2 = solve_with(&sys2, frac, partition, &second.datum, None)?;
    let m = frac.masses();
    let interior = partition.interior();
    let exterior = partition.exterior();
    let dq = q1.difference(q2);
    let dq_sup = dq.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let norm = |v: &mut dyn Iterator<Item = (usize, f64)>| v.map(|(i, x)| x * x * m[i]).sum::<f64>().sqrt();
    let u2_int: Vec<f64> = interior.iter().map(|&i| u2.u[i]).collect();
    let u2_norm = norm(&mut interior.iter().map(|&i| (i, u2.u[i])));
    let u2_gap = norm(&mut interior.iter().map(|&i| (i, u2.u[i] - 1.0)));

    let mut set = MomentSet {
        mu: Vec::new(),
        identity: Vec::new(),
        target: Vec::new(),
        budget: Vec::new(),
        probe_errors: Vec::new(),
        unit_error: second.relative_error,
        scale: Vec::new(),
        first_controls: Vec::new(),
        second_control: second.datum.clone(),
    };
    for f in probes {
        if f.len() != k {
            return Err(Error::DimensionMismatch { expected: k, found: f.len() });
        }
        let first = runge1.solve(f, alpha)?;
        let u1 = solve_with(&sys1, frac, partition, &first.datum, None)?;
        let u21 = solve_with(&sys2, frac, partition, &first.datum, None)?;
        let s1 = frac.apply(&u1.u);
        let s21 = frac.apply(&u21.u);
        let (mut mu, mut scale) = (0.0, 0.0);
        for (b, &i) in exterior.iter().enumerate() {
            let g2 = second.datum[b];
            mu += (s1[i] - s21[i]) * g2 * m[i];
            scale += (s1[i] * g2 * m[i]).abs() + (s21[i] * g2 * m[i]).abs();
        }
        let mut identity = 0.0;
        let mut target = 0.0;
        for (a, &i) in interior.iter().enumerate() {
            identity += dq[a] * u1.u[i] * u2_int[a] * m[i];
            target += dq[a] * f[a] * m[i];
        }
        let u1_gap = norm(&mut interior.iter().enumerate().map(|(a, &i)| (i, u1.u[i] - f[a])));
        let f_norm = norm(&mut interior.iter().enumerate().map(|(a, &i)| (i, f[a])));
        set.mu.push(mu);
        set.identity.push(identity);
        set.target.push(target);
        set.budget.push(dq_sup * (u1_gap * u2_norm + f_norm * u2_gap));
        set.probe_errors.push(first.relative_error);
        set.scale.push(scale);
        set.first_controls.push(first.datum);
    }
    Ok(set)
}

/// Weighted Frobenius norm `(Σ_{ab} X_ab² m_a m_b)^{1/2}` on exterior blocks.
pub fn dn_norm(x: &DMatrix<f64>, masses: &[f64]) -> f64 {
    let mut sum = 0.0;
    for b in 0..x.ncols() {
        for a in 0..x.nrows() {
            sum += x[(a, b)].powi(2) * masses[a] * masses[b];
        }
    }
    sum.sqrt()
}

/// Derivative of `Λ_q` with respect to `q_k`: `dΛ_{ba} = m_k R_kb R_ka / m_b`
/// with `R` the interior response. Returned as a list of exterior matrices.
pub fn dn_jacobian(frac: &FractionalOperator, partition: &DomainPartition, dn: &DnMap) -> Vec<DMatrix<f64>> {
    let r = dn.response();
    let m = frac.masses();
    let me = dn.exterior_masses();
    let ne = me.len();
    partition
        .interior()
        .iter()
        .enumerate()
        .map(|(k, &node)| {
            let row = r.row(k);
            DMatrix::from_fn(ne, ne, |b, a| m[node] * row[b] * row[a] / me[b])
        })
        .collect()
}

/// Why the Gauss-Newton iteration stopped.
#[derive(Clone, Debug, PartialEq)]
pub enum Termination {
    Converged,
    MaxIterations,
    /// Backtracking could not decrease the objective; the error is kept for reporting.
    LineSearch(Error),
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    pub q: Potential,
    /// `‖Λ_q - Λ_obs‖` at the initial and every accepted iterate.
    pub misfit: Vec<f64>,
    /// Full objective at the same iterates.
    pub objective: Vec<f64>,
    pub gradient_norm: Vec<f64>,
    pub alpha: f64,
    pub iterations: usize,
    pub termination: Termination,
}

impl ReconstructionResult {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }

    pub fn misfit_nonincreasing(&self) -> bool {
        self.misfit.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12))
    }
}

struct Evaluation {
    dn: DnMap,
    residual: DMatrix<f64>,
    misfit: f64,
    objective: f64,
}

fn evaluate(
    frac: &FractionalOperator,
    partition: &DomainPartition,
    observed: &DMatrix<f64>,
    q: &Potential,
    q0: &Potential,
    alpha: f64,
) -> Result<Evaluation> {
    let dn = assemble_dn_map(frac, q, partition)?;
    let residual = dn.matrix() - observed;
    let misfit = dn_norm(&residual, dn.exterior_masses());
    let m = frac.masses();
    let reg: f64 = partition
        .interior()
        .iter()
        .zip(q.difference(q0))
        .map(|(&i, d)| d * d * m[i])
        .sum();
    Ok(Evaluation { dn, residual, misfit, objective: misfit * misfit + alpha * reg })
}

/// Gauss-Newton with Armijo backtracking on
/// `F(q) = ‖Λ_q - Λ_obs‖² + α ‖q - q_init‖²_M`.
pub fn reconstruct_potential(
    frac: &FractionalOperator,
    partition: &DomainPartition,
    observed: &DMatrix<f64>,
    q_init: &Potential,
    alpha: f64,
    max_iter: usize,
) -> Result<ReconstructionResult> {
    let ne = partition.exterior().len();
    if observed.nrows() != ne || observed.ncols() != ne {
        return Err(Error::DimensionMismatch { expected: ne, found: observed.nrows() });
    }
    if !(alpha >= 0.0) {
        return Err(Error::InvalidParameter(format!("regularization must be nonnegative, got {alpha}")));
    }
    let m = frac.masses();
    let mi: Vec<f64> = partition.interior().iter().map(|&i| m[i]).collect();
    let k = mi.len();
    let mut q = q_init.clone();
    let mut eval = evaluate(frac, partition, observed, &q, q_init, alpha)?;
    let mut misfit = vec![eval.misfit];
    let mut objective = vec![eval.objective];
    let mut gradient_norm = Vec::new();
    let mut initial_grad = None;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    for it in 0..=max_iter {
        let me = eval.dn.exterior_masses().to_vec();
        let jac = dn_jacobian(frac, partition, &eval.dn);
        // weighted residual and Jacobian columns, entry (b, a) scaled by √(m_b m_a)
        let w = |b: usize, a: usize| (me[b] * me[a]).sqrt();
        let nr = ne * ne;
        let mut jm = DMatrix::<f64>::zeros(nr, k);
        let mut rv = DVector::<f64>::zeros(nr);
        for a in 0..ne {
            for b in 0..ne {
                let row = a * ne + b;
                rv[row] = eval.residual[(b, a)] * w(b, a);
                for (c, d) in jac.iter().enumerate() {
                    jm[(row, c)] = d[(b, a)] * w(b, a);
                }
            }
        }
        let dq = q.difference(q_init);
        let mut grad = jm.transpose() * &rv;
        for c in 0..k {
            grad[c] += alpha * mi[c] * dq[c];
        }
        let gnorm = grad.norm();
        gradient_norm.push(gnorm);
        let g0 = *initial_grad.get_or_insert(gnorm);
        if gnorm <= 1e-8 * g0 || gnorm == 0.0 {
            termination = Termination::Converged;
            break;
        }
        if it == max_iter {
            break;
        }
        let mut h = jm.transpose() * &jm;
        for c in 0..k {
            h[(c, c)] += alpha * mi[c];
        }
        // tiny ridge keeps the normal matrix invertible when α = 0
        let ridge = 1e-14 * h.diagonal().max();
        for c in 0..k {
            h[(c, c)] += ridge;
        }
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&(-&grad)),
            None => h.lu().solve(&(-&grad)).ok_or(Error::NearSingular { condition: f64::INFINITY })?,
        };
        let slope = 2.0 * grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial = Potential::new(q.values().iter().zip(step.iter()).map(|(a, b)| a + t * b).collect())?;
            match evaluate(frac, partition, observed, &trial, q_init, alpha) {
                // accepted steps must also keep the data misfit from growing
                Ok(e) if e.objective <= eval.objective + 1e-4 * t * slope && e.misfit <= eval.misfit => {
                    accepted = Some((trial, e));
                    break;
                }
                Ok(_) | Err(Error::NearSingular { .. }) => t *= 0.5,
                Err(e) => return Err(e),
            }
        }
        match accepted {
            Some((trial, e)) => {
                q = trial;
                eval = e;
                iterations = it + 1;
                misfit.push(eval.misfit);
                objective.push(eval.objective);
            }
            None => {
                termination = Termination::LineSearch(Error::NonDecreasingMisfit { iteration: it });
                break;
            }
        }
    }
    Ok(ReconstructionResult { q, misfit, objective, gradient_norm, alpha, iterations, termination })
}

/// Multiplies every entry by `1 + level·ξ`, `ξ` uniform with unit variance,
/// from a seeded stream.
pub fn add_multiplicative_noise(map: &DMatrix<f64>, level: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 3f64.sqrt();
    map.map(|v| v * (1.0 + level * rng.random_range(-half..half)))
}

/// Discrepancy principle: runs the reconstruction for decreasing `alphas`
/// and returns the first whose misfit falls below `tau·noise`, or the last.
pub fn reconstruct_with_discrepancy(
    frac: &FractionalOperator,
    partition: &DomainPartition,
    observed: &DMatrix<f64>,
    q_init: &Potential,
    noise: f64,
    tau: f64,
    alphas: &[f64],
    max_iter: usize,
) -> Result<ReconstructionResult> {
    let mut last = None;
    for &alpha in alphas {
        let res = reconstruct_potential(frac, partition, observed, q_init, alpha, max_iter)?;
        let fit = *res.misfit.last().expect("misfit history is never empty");
        if fit <= tau * noise {
            return Ok(res);
        }
        last = Some(res);
    }
    last.ok_or_else(|| Error::InvalidParameter("no regularization values given".into()))
}

/// Restricts a DN map computed on a grid refined by a factor 2 to the
/// exterior nodes of a coarse grid: coarse data are interpolated
/// multilinearly to the fine exterior, the fine map applied, and the result
/// sampled at the coarse nodes.
pub fn restrict_dn_map(
    fine: &DnMap,
    fine_grid: &Grid,
    fine_partition: &DomainPartition,
    coarse_grid: &Grid,
    coarse_partition: &DomainPartition,
) -> Result<DMatrix<f64>> {
    let nc = coarse_grid.points_per_axis();
    if fine_grid.dim() != coarse_grid.dim()
        || fine_grid.points_per_axis() != 2 * nc - 1
        || (fine_grid.half_extent() - coarse_grid.half_extent()).abs() > 1e-12
    {
        return Err(Error::InvalidGrid("fine grid must refine the coarse grid by a factor 2".into()));
    }
    let dim = coarse_grid.dim();
    let fe = fine_partition.exterior();
    let ce = coarse_partition.exterior();
    // interpolation: coarse exterior -> fine exterior
    let mut p = DMatrix::<f64>::zeros(fe.len(), ce.len());
    for (r, &f) in fe.iter().enumerate() {
        let mi = fine_grid.multi_index(f);
        let mut parents: Vec<(usize, f64)> = Vec::new();
        let choices: Vec<Vec<usize>> = (0..dim)
            .map(|d| if mi[d].is_multiple_of(2) { vec![mi[d] / 2] } else { vec![mi[d] / 2, mi[d] / 2 + 1] })
            .collect();
        let count: usize = choices.iter().map(Vec::len).product();
        for c in 0..count {
            let mut rest = c;
            let mut cm = [0usize; 2];
            for d in 0..dim {
                cm[d] = choices[d][rest % choices[d].len()];
                rest /= choices[d].len();
            }
            if let Some(slot) = coarse_partition.exterior_position(coarse_grid.index(cm)) {
                parents.push((slot, 1.0));
            }
        }
        if parents.is_empty() {
            return Err(Error::InvalidPartition(format!("fine exterior node {f} has no exterior coarse parent")));
        }
        let wsum = parents.len() as f64;
        for (slot, w) in parents {
            p[(r, slot)] += w / wsum;
        }
    }
    let applied = fine.matrix() * p;
    let mut out = DMatrix::<f64>::zeros(ce.len(), ce.len());
    for (a, &c) in ce.iter().enumerate() {
        let mut mi = coarse_grid.multi_index(c);
        for d in 0..dim {
            mi[d] *= 2;
        }
        let f = fine_grid.index(mi);
        let slot = fine_partition
            .exterior_position(f)
            .ok_or_else(|| Error::InvalidPartition(format!("coarse exterior node {c} is interior on the fine grid")))?;
        out.set_row(a, &applied.row(slot));
    }
    Ok(out)
}
