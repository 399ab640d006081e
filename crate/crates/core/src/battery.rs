//! The acceptance battery: thirteen fixed scenarios, each reduced to named
//! checks with explicit tolerances.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::assembly::assemble_local_operator;
use crate::checks::*;
use crate::diagnostics::sucp_probe;
use crate::error::Result;
use crate::grid::{partition_domain, sample_coefficient, CoefficientSpec, DomainPartition, Grid, Region, Truncation};
use crate::inverse::{
    add_multiplicative_noise, dn_jacobian, dn_norm, extract_moments, indicator_probes, reconstruct_potential,
    reconstruct_with_discrepancy, MomentMode, RungeSolver,
};
use crate::nonlocal::{
    assemble_dn_map, dn_via_neumann, eigenvalue_report, integral_identity_residual, solve_dirichlet, Potential,
};
use crate::spectral::{eigendecompose, fractional_power, kernel_from_heat, FractionalOperator, QuadratureSpec, SpectralDecomposition};

/// Outcome of one acceptance criterion.
#[derive(Clone, Debug)]
pub struct CriterionReport {
    pub id: usize,
    pub title: &'static str,
    pub checks: Vec<Check>,
}

impl CriterionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

pub const CRITERIA: usize = 13;

pub fn title(id: usize) -> &'static str {
    match id {
        1 => "spectral calculus",
        2 => "kernel laws",
        3 => "heat kernel",
        4 => "forward problem",
        5 => "DN map",
        6 => "integral identity",
        7 => "extension consistency",
        8 => "frequency and doubling",
        9 => "SUCP probe",
        10 => "Runge approximation",
        11 => "uniqueness moments",
        12 => "reconstruction",
        13 => "truncation honesty",
        _ => "unknown",
    }
}

/// Runs criterion `id`; numerical failures are folded into a failed check.
pub fn run(id: usize, seed: u64) -> CriterionReport {
    let result = match id {
        1 => spectral_calculus(),
        2 => kernel_laws_criterion(),
        3 => heat_kernel_criterion(),
        4 => forward_problem(seed),
        5 => dn_map(seed),
        6 => integral_identity(seed),
        7 => extension_consistency(),
        8 => frequency_doubling(),
        9 => sucp(),
        10 => runge(),
        11 => moments(),
        12 => reconstruction(seed),
        13 => truncation_honesty(),
        _ => Ok(vec![Check::flag("known criterion", false)]),
    };
    let checks = result.unwrap_or_else(|e| {
        let mut c = Check::flag("numerical failure", false);
        c.name = format!("numerical failure: {e}");
        vec![c]
    });
    CriterionReport { id, title: title(id), checks }
}

fn sine_coefficient(amplitude: f64) -> CoefficientSpec {
    CoefficientSpec::diagonal(vec![move |x: &[f64]| 1.0 + amplitude * x[0].sin()])
}

struct Problem {
    grid: Grid,
    decomp: SpectralDecomposition,
}

fn problem(n: usize, points: usize, half_extent: f64, spec: &CoefficientSpec) -> Result<Problem> {
    let grid = Grid::build(n, half_extent, points, Truncation::Reflecting)?;
    let coeff = sample_coefficient(&grid, spec)?;
    let decomp = eigendecompose(&assemble_local_operator(&grid, &coeff)?)?;
    Ok(Problem { grid, decomp })
}

/// `Ω = (-½, ½)`, `O₁ = [¾, 7/4)`, `O₂ = [-7/4, -¾)`.
fn standard_partition(grid: &Grid) -> Result<DomainPartition> {
    partition_domain(
        grid,
        &Region::ball(&[0.0], 0.5),
        Some(&Region::interval(0.75, 1.75)),
        Some(&Region::interval(-1.75, -0.75)),
    )
}

fn bump(grid: &Grid, partition: &DomainPartition, amplitude: f64) -> Potential {
    Potential::from_fn(grid, partition, |x| amplitude * (1.0 - (x[0] / 0.5).powi(2)).max(0.0).powi(2))
}

fn spectral_calculus() -> Result<Vec<Check>> {
    let start = Instant::now();
    let mut out = Vec::new();
    for (label, spec) in [("A=I", CoefficientSpec::Identity), ("A=1+0.3sin", sine_coefficient(0.3))] {
        let grid = Grid::build(1, 2.0, 128, Truncation::Reflecting)?;
        let coeff = sample_coefficient(&grid, &spec)?;
        let op = assemble_local_operator(&grid, &coeff)?;
        let decomp = eigendecompose(&op)?;
        let sc = spectral_checks(&op, &decomp)?;
        let semi = sc.semigroup.iter().find(|p| p.0 == (0.3, 0.4)).map_or(f64::NAN, |p| p.1);
        out.push(Check::at_most(format!("{label} semigroup S(0.3)S(0.4)=S(0.7)"), semi, 1e-10));
        out.push(Check::at_most(format!("{label} semigroup all pairs"), sc.max_semigroup(), 1e-10));
        out.push(Check::at_most(format!("{label} S(1)=L"), sc.unit_power, 1e-12));
        out.push(Check::at_most(format!("{label} S(1/2)^2=L"), sc.half_square, 1e-10));
    }
    out.push(Check::runtime("runtime seconds", start.elapsed().as_secs_f64(), 10.0));
    Ok(out)
}

fn kernel_laws_criterion() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (n, s) in [(1usize, 0.25), (1, 0.5), (1, 0.75), (2, 0.5)] {
        let points = if n == 1 { 129 } else { 33 };
        let p = problem(n, points, 2.0, &CoefficientSpec::Identity)?;
        let frac = fractional_power(&p.decomp, s)?;
        let laws = kernel_laws(&frac);
        let tag = format!("n={n} s={s}");
        out.push(Check::at_most(format!("{tag} kernel asymmetry"), laws.asymmetry, 1e-12));
        out.push(Check::at_least(format!("{tag} min off-diagonal kernel"), laws.min_off_diagonal, -1e-12));
        let target = -(n as f64 + 2.0 * s);
        let slope = kernel_decay_exponent(&p.grid, &frac)?;
        out.push(Check::report(format!("{tag} decay exponent"), slope));
        out.push(Check::at_most(format!("{tag} |decay exponent + (n+2s)|"), (slope - target).abs(), 0.3));
    }
    let p = problem(1, 33, 2.0, &CoefficientSpec::Identity)?;
    let frac = fractional_power(&p.decomp, 0.5)?;
    let quad = kernel_from_heat(&p.decomp, 0.5, &QuadratureSpec::default())?;
    out.push(Check::at_most("quadrature kernel vs extracted", relative_frobenius(&quad, frac.kernel()), 1e-4));
    Ok(out)
}

fn heat_kernel_criterion() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (label, spec) in [("A=I", CoefficientSpec::Identity), ("A=1+0.3sin", sine_coefficient(0.3))] {
        let p = problem(1, 128, 2.0, &spec)?;
        for t in [0.01, 0.1, 1.0] {
            out.push(Check::at_most(format!("{label} mass defect t={t}"), heat_mass_defect(&p.decomp, t)?, 1e-10));
        }
    }
    let big = problem(1, 257, 8.0, &CoefficientSpec::Identity)?;
    for t in [0.1, 1.0] {
        let g = gaussian_log_slope(&big.grid, &big.decomp, t, (1.0, 1.0))?;
        out.push(Check::report(format!("Gaussian log-slope t={t}"), g.slope));
        out.push(Check::report(format!("Gaussian slope bracketed t={t}"), if g.bracketed { 1.0 } else { 0.0 }));
    }
    Ok(out)
}

fn forward_problem(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut constants = Vec::new();
    for points in [33, 65] {
        let p = problem(1, points, 2.0, &CoefficientSpec::Identity)?;
        let frac = fractional_power(&p.decomp, 0.5)?;
        let part = standard_partition(&p.grid)?;
        let q = bump(&p.grid, &part, 1.0);
        let c = forward_bound_constant(&p.grid, &frac, &q, &part, seed, 20)?;
        out.push(Check::report(format!("bound constant C at N={points}"), c));
        constants.push(c);
        if points == 33 {
            let shift = 0.7;
            let a = eigenvalue_report(&frac, &q, &part, None)?;
            let b = eigenvalue_report(&frac, &q.shifted(shift), &part, None)?;
            let scale = a.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let defect = a.eigenvalues.iter().zip(&b.eigenvalues).map(|(x, y)| (y - x - shift).abs()).fold(0.0, f64::max);
            out.push(Check::at_most("eigenvalue shift identity", defect / scale, 1e-10));
            out.push(Check::flag("zero is not an eigenvalue", !a.zero_is_eigenvalue));
        }
    }
    out.push(Check::flag("20 solves succeed at each resolution", true));
    out.push(Check::at_most("|C(2N)/C(N) - 1|", (constants[1] / constants[0] - 1.0).abs(), 0.2));
    Ok(out)
}

fn random_vector(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dn_map(seed: u64) -> Result<Vec<Check>> {
    let p = problem(1, 65, 2.0, &sine_coefficient(0.3))?;
    let frac = fractional_power(&p.decomp, 0.5)?;
    let part = standard_partition(&p.grid)?;
    let q = bump(&p.grid, &part, 1.0);
    let dn = assemble_dn_map(&frac, &q, &part)?;
    let ne = part.exterior().len();
    let mut rng = seeded(seed);
    let (mut sym, mut rep) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let g = random_vector(&mut rng, ne);
        let h = random_vector(&mut rng, ne);
        sym = sym.max(dn.symmetry_defect(&g, &h));
        let sol = solve_dirichlet(&frac, &q, &part, &g, None)?;
        let via = dn_via_neumann(&frac, &part, &sol, &g)?;
        rep = rep.max(relative_l2(&via.dn, &dn.apply(&g)));
    }
    Ok(vec![
        Check::at_most("max symmetry defect over 20 pairs", sym, 1e-10),
        Check::at_most("Neumann representation vs matrix", rep, 1e-10),
    ])
}

fn supported_on(part: &DomainPartition, nodes: &[usize], rng: &mut impl Rng) -> Vec<f64> {
    let mut g = vec![0.0; part.exterior().len()];
    for &i in nodes {
        g[part.exterior_position(i).expect("control nodes are exterior")] = rng.random_range(-1.0..1.0);
    }
    g
}

fn integral_identity(seed: u64) -> Result<Vec<Check>> {
    let p = problem(1, 65, 2.0, &sine_coefficient(0.3))?;
    let frac = fractional_power(&p.decomp, 0.5)?;
    let part = standard_partition(&p.grid)?;
    let k = part.interior().len();
    let ne = part.exterior().len();
    let mut rng = seeded(seed);
    let (mut worst, mut disjoint) = (0.0f64, 0.0f64);
    for trial in 0..10 {
        let q1 = Potential::new((0..k).map(|_| rng.random_range(0.0..2.0)).collect())?;
        let q2 = Potential::new((0..k).map(|_| rng.random_range(0.0..2.0)).collect())?;
        let (g1, g2) = if trial % 2 == 0 {
            (supported_on(&part, part.first_region(), &mut rng), supported_on(&part, part.second_region(), &mut rng))
        } else {
            (random_vector(&mut rng, ne), random_vector(&mut rng, ne))
        };
        let r = integral_identity_residual(&frac, &q1, &q2, &part, &g1, &g2)?.residual;
        worst = worst.max(r);
        if trial % 2 == 0 {
            disjoint = disjoint.max(r);
        }
    }
    Ok(vec![
        Check::at_most("max identity residual over 10 draws", worst, 1e-9),
        Check::at_most("max residual with disjoint O1/O2 supports", disjoint, 1e-9),
    ])
}

fn extension_consistency() -> Result<Vec<Check>> {
    let start = Instant::now();
    let mut out = Vec::new();
    let grid = Grid::build(1, 2.0, 129, Truncation::Reflecting)?;
    let coeff = sample_coefficient(&grid, &sine_coefficient(0.3))?;
    let decomp = eigendecompose(&assemble_local_operator(&grid, &coeff)?)?;
    let datum: Vec<f64> = grid.axis().iter().map(|x| (-2.0 * x * x).exp()).collect();
    for s in [0.25, 0.5, 0.75] {
        let a = trace_consistency(&grid, &coeff, &decomp, s, &datum, 256)?;
        let b = trace_consistency(&grid, &coeff, &decomp, s, &datum, 512)?;
        out.push(Check::at_most(format!("s={s} trace error J=256"), a.weak_form, 0.05));
        out.push(Check::report(format!("s={s} trace error J=512"), b.weak_form));
        out.push(Check::at_most(format!("s={s} error ratio J=512/J=256"), b.weak_form / a.weak_form, 0.55));
        out.push(Check::report(format!("s={s} difference-quotient error J=256"), a.difference_quotient));
    }
    let norm = [0.1, 0.25, 0.5, 0.75, 0.9].iter().map(|&s| poisson_normalization(s, &[0.01, 0.1, 1.0, 10.0])).fold(0.0, f64::max);
    out.push(Check::at_most("Poisson normalization |phi_y(0) - 1|", norm, 1e-8));
    let agree = poisson_agreement(&grid, &coeff, &decomp, 0.5, &datum, 256)?;
    out.push(Check::at_most("variational vs Poisson field", agree, 0.02));
    out.push(Check::runtime("runtime seconds", start.elapsed().as_secs_f64(), 60.0));
    Ok(out)
}

fn frequency_doubling() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for degree in [1u32, 2] {
        let (profile, doubling) = homogeneous_profile(degree, 0.5)?;
        let d = degree as f64;
        let n_err = profile.n.iter().map(|v| (v - d).abs() / d).fold(0.0, f64::max);
        let target = homogeneous_doubling_ratio(degree, 1, 0.5);
        let r_err = doubling.ratios.iter().map(|r| (r.1 - target).abs() / target).fold(0.0, f64::max);
        out.push(Check::at_most(format!("degree {degree} max |N - d|/d"), n_err, 0.1));
        out.push(Check::at_most(format!("degree {degree} max |H(2r)/H(r) / {target} - 1|"), r_err, 0.15));
    }
    let (_, doubling, off_plane) = variable_coefficient_profile()?;
    out.push(Check::report("variable A: C*", doubling.c_star));
    out.push(Check::report("variable A: max doubling ratio", doubling.max_ratio));
    out.push(Check::flag("variable A: C* and doubling ratio finite", doubling.c_star.is_finite() && doubling.max_ratio.is_finite()));
    out.push(Check::report("variable A: reflected residual off the plane", off_plane));
    Ok(out)
}

fn sucp() -> Result<Vec<Check>> {
    let grid = Grid::build(1, 1.0, 33, Truncation::Reflecting)?;
    let coeff = sample_coefficient(&grid, &CoefficientSpec::Identity)?;
    let decomp = eigendecompose(&assemble_local_operator(&grid, &coeff)?)?;
    let half = fractional_power(&decomp, 0.5)?;
    let local = fractional_power(&decomp, 1.0)?;
    let n = grid.len();
    let probe = |f: &FractionalOperator, o: &[usize]| sucp_probe(f, o, None).map(|p| p.value);
    let mut singles = f64::INFINITY;
    for i in 0..n {
        singles = singles.min(probe(&half, &[i])?);
    }
    // every contiguous window
    let mut windows = f64::INFINITY;
    for len in 1..=n {
        for start in 0..=n - len {
            windows = windows.min(probe(&half, &(start..start + len).collect::<Vec<_>>())?);
        }
    }
    let chain: Vec<Vec<usize>> = [4usize, 8, 16, 24].iter().map(|&k| (16 - k / 2..16 - k / 2 + k).collect()).collect();
    let values: Vec<f64> = chain.iter().map(|o| probe(&half, o)).collect::<Result<_>>()?;
    let monotone = values.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-9));
    let mut out = vec![
        Check::at_least("min probe over single nodes", singles, 1e-12),
        Check::at_least("min probe over contiguous windows", windows, 1e-12),
        Check::flag("nondecreasing over nested chain of 4 sets", monotone),
    ];
    for (o, v) in chain.iter().zip(&values) {
        out.push(Check::report(format!("probe |O|={}", o.len()), *v));
    }
    out.push(Check::report("s=1 contrast probe |O|=24", probe(&local, &chain[3])?));
    out.push(Check::report("probe whole grid", probe(&half, &(0..n).collect::<Vec<_>>())?));
    Ok(out)
}

fn runge() -> Result<Vec<Check>> {
    let p = problem(1, 65, 2.0, &CoefficientSpec::Identity)?;
    let frac = fractional_power(&p.decomp, 0.5)?;
    let part = standard_partition(&p.grid)?;
    let q = Potential::zero(&part);
    let ones = vec![1.0; part.interior().len()];
    let mut controls = part.first_region().to_vec();
    controls.extend_from_slice(part.second_region());
    let alphas: Vec<f64> = (2..=10).map(|k| 10f64.powi(-k)).collect();
    let full = RungeSolver::new(&frac, &q, &part, &controls)?;
    let errs: Vec<f64> = alphas.iter().map(|&a| full.solve(&ones, a).map(|r| r.relative_error)).collect::<Result<_>>()?;
    let two = RungeSolver::new(&frac, &q, &part, &part.first_region()[..2])?;
    let poor: Vec<f64> = alphas.iter().map(|&a| two.solve(&ones, a).map(|r| r.relative_error)).collect::<Result<_>>()?;
    let tail = &poor[poor.len() - 3..];
    let spread = (tail[0] - tail[2]).abs() / tail[2];
    Ok(vec![
        Check::report("|O|", controls.len() as f64),
        Check::report("|interior|", ones.len() as f64),
        Check::flag("error strictly decreasing over alpha sweep", errs.windows(2).all(|w| w[1] < w[0])),
        Check::at_most("final relative error", *errs.last().expect("nonempty sweep"), 0.05),
        Check::at_least("|O|=2 final relative error (floor)", *poor.last().expect("nonempty sweep"), 1e-2),
        Check::at_most("|O|=2 change over last three alphas", spread, 0.05),
    ])
}

fn moments() -> Result<Vec<Check>> {
    let p = problem(1, 65, 2.0, &CoefficientSpec::Identity)?;
    let frac = fractional_power(&p.decomp, 0.5)?;
    let part = standard_partition(&p.grid)?;
    let zero = Potential::zero(&part);
    let probes = indicator_probes(&frac, &part, 5)?;
    let alpha = 1e-8;
    let same = extract_moments(&frac, &part, &zero, &zero, &probes, alpha, &MomentMode::Exact)?;
    let q1 = bump(&p.grid, &part, 1.0);
    let diff = extract_moments(&frac, &part, &q1, &zero, &probes, alpha, &MomentMode::Exact)?;
    let scale = same.scale.iter().cloned().fold(0.0, f64::max);
    // an exactly vanishing baseline is floored at round-off level
    let baseline = same.max_abs().max(f64::EPSILON * scale);
    let mut out = vec![
        Check::at_most("baseline max|mu| / scale", same.max_abs() / scale, 1e-9),
        Check::at_least("contrast max|mu| / baseline", diff.max_abs() / baseline, 10.0),
        Check::at_most("identity consistency", diff.consistency(), 1e-9),
    ];
    for k in 0..probes.len() {
        out.push(Check::report(format!("probe {k}: mu"), diff.mu[k]));
        out.push(Check::report(format!("probe {k}: target"), diff.target[k]));
        out.push(Check::report(format!("probe {k}: budget"), diff.budget[k]));
    }
    Ok(out)
}

fn reconstruction(seed: u64) -> Result<Vec<Check>> {
    let start = Instant::now();
    let p = problem(1, 65, 2.0, &CoefficientSpec::Identity)?;
    let frac = fractional_power(&p.decomp, 0.5)?;
    let part = standard_partition(&p.grid)?;
    let truth = bump(&p.grid, &part, 1.0);
    let zero = Potential::zero(&part);
    let observed = assemble_dn_map(&frac, &truth, &part)?.matrix().clone();
    let res = reconstruct_potential(&frac, &part, &observed, &zero, 1e-12, 25)?;
    let rel = |q: &Potential| {
        let m = frac.masses();
        let w: Vec<f64> = part.interior().iter().map(|&i| m[i]).collect();
        let num: f64 = truth.difference(q).iter().zip(&w).map(|(d, m)| d * d * m).sum();
        let den: f64 = truth.values().iter().zip(&w).map(|(d, m)| d * d * m).sum();
        (num / den).sqrt()
    };
    let mut out = vec![
        Check::at_most("relative L2 error", rel(&res.q), 0.1),
        Check::at_most("iterations", res.iterations as f64, 25.0),
        Check::flag("misfit nonincreasing", res.misfit_nonincreasing()),
    ];
    // Jacobian on 5 seeded nodes
    let dn = assemble_dn_map(&frac, &truth, &part)?;
    let jac = dn_jacobian(&frac, &part, &dn);
    let mut nodes: Vec<usize> = (0..truth.len()).collect();
    nodes.shuffle(&mut seeded(seed));
    let mut worst = 0.0f64;
    for &k in &nodes[..5] {
        let h = 1e-4;
        let mut plus = truth.values().to_vec();
        let mut minus = plus.clone();
        plus[k] += h;
        minus[k] -= h;
        let a = assemble_dn_map(&frac, &Potential::new(plus)?, &part)?;
        let b = assemble_dn_map(&frac, &Potential::new(minus)?, &part)?;
        let fd: DMatrix<f64> = (a.matrix() - b.matrix()) / (2.0 * h);
        worst = worst.max(relative_frobenius(&fd, &jac[k]));
    }
    out.push(Check::at_most("Jacobian vs finite differences", worst, 1e-6));
    // noisy run: reported, the entrywise noise dominates the potential's signal
    let noisy = add_multiplicative_noise(&observed, 0.01, seed);
    let me = dn.exterior_masses();
    let level = 0.01 * dn_norm(&noisy, me);
    let alphas: Vec<f64> = (1..=8).map(|k| 10f64.powi(-k)).collect();
    let noisy_res = reconstruct_with_discrepancy(&frac, &part, &noisy, &zero, level, 1.1, &alphas, 25)?;
    out.push(Check::report("1% noise: relative L2 error", rel(&noisy_res.q)));
    out.push(Check::report("1% noise: alpha", noisy_res.alpha));
    out.push(Check::flag("1% noise: misfit nonincreasing", noisy_res.misfit_nonincreasing()));
    let signal = &observed - assemble_dn_map(&frac, &zero, &part)?.matrix();
    out.push(Check::report("noise norm / potential signal norm", dn_norm(&(&noisy - &observed), me) / dn_norm(&signal, me)));
    out.push(Check::runtime("runtime seconds", start.elapsed().as_secs_f64(), 300.0));
    Ok(out)
}

fn truncation_honesty() -> Result<Vec<Check>> {
    let small = truncation_probe(4.0, 1.0 / 16.0, 0.5)?;
    let large = truncation_probe(8.0, 1.0 / 16.0, 0.5)?;
    let c = TruncationChange::between(&small, &large);
    Ok(vec![
        Check::at_most("L^s of a bump on [-1,1]", c.centre_action, 0.01),
        Check::at_most("kernel row at short separations", c.kernel_row, 0.01),
        Check::at_most("kernel decay exponent", c.decay_exponent, 0.01),
        Check::at_most("DN self-pairing", c.dn_self, 0.01),
        Check::report("DN cross-pairing O1 to O2", c.dn_cross),
    ])
}
