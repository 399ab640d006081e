//! The named experiments. Each is split into a validating setup (config
//! errors only) and a run that writes CSV artifacts and returns checks.

use std::collections::BTreeMap;
use std::path::Path;

use clap::ValueEnum;
use fraclab_core::assembly::{assemble_extension_operator, assemble_local_operator};
use fraclab_core::battery::{self, CRITERIA};
use fraclab_core::checks::*;
use fraclab_core::diagnostics::sucp_probe;
use fraclab_core::extension::{build_extension_grid, default_height, solve_extension_dirichlet};
use fraclab_core::grid::{CoefficientField, DomainPartition, Grid};
use fraclab_core::inverse::{
    add_multiplicative_noise, dn_norm, extract_moments, indicator_probes, reconstruct_potential,
    reconstruct_with_discrepancy, restrict_dn_map, MomentMode, RungeSolver,
};
use fraclab_core::io::{write_columns_csv, write_extension_csv, write_matrix_csv, write_profile_csv, CsvHeader};
use fraclab_core::nonlocal::{
    assemble_dn_map, dn_via_neumann, eigenvalue_report, integral_identity_residual, solve_dirichlet, Potential,
};
use fraclab_core::spectral::{eigendecompose, fractional_power, kernel_from_heat, QuadratureSpec};
use fraclab_core::Error as CoreError;
use rand::Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{ConfigError, ExperimentConfig, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    Operator,
    Forward,
    Dnmap,
    Extension,
    Frequency,
    Runge,
    Moments,
    Reconstruct,
    Suite,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Operator => "operator",
            Experiment::Forward => "forward",
            Experiment::Dnmap => "dnmap",
            Experiment::Extension => "extension",
            Experiment::Frequency => "frequency",
            Experiment::Runge => "runge",
            Experiment::Moments => "moments",
            Experiment::Reconstruct => "reconstruct",
            Experiment::Suite => "suite",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("numerical failure: {0}")]
    Numerical(#[from] CoreError),
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
}

/// Checks, scalar metrics and the artifact files written by a run.
#[derive(Debug, Default)]
pub struct Outcome {
    pub checks: Vec<Check>,
    pub metrics: BTreeMap<String, Value>,
    pub artifacts: Vec<String>,
}

impl Outcome {
    fn metric(&mut self, key: &str, value: impl Into<Value>) {
        self.metrics.insert(key.to_string(), value.into());
    }

    fn artifact(&mut self, name: &str) {
        self.artifacts.push(name.to_string());
    }
}

/// Validated inputs; built before anything is written.
pub struct Setup {
    experiment: Experiment,
    grid: Option<Grid>,
    coeff: Option<CoefficientField>,
    s: Option<f64>,
    partition: Option<DomainPartition>,
    q1: Option<Potential>,
    q2: Option<Potential>,
    potentials_equal: bool,
    seed: Option<u64>,
    params: Parameters,
    config: ExperimentConfig,
}

struct Needs {
    grid: bool,
    domain: bool,
    both_regions: bool,
    seed: bool,
    fractional: bool,
}

impl Setup {
    pub fn new(experiment: Experiment, config: &ExperimentConfig, cli_seed: Option<u64>) -> Result<Self, ConfigError> {
        if let Some(name) = &config.experiment {
            if name != experiment.name() {
                return Err(ConfigError::Invalid(format!(
                    "config is for experiment '{name}', not '{}'",
                    experiment.name()
                )));
            }
        }
        use Experiment::*;
        let needs = Needs {
            grid: !matches!(experiment, Frequency | Suite),
            domain: matches!(experiment, Forward | Dnmap | Runge | Moments | Reconstruct),
            both_regions: matches!(experiment, Dnmap | Moments),
            seed: matches!(experiment, Forward | Dnmap | Suite)
                || (experiment == Reconstruct && config.parameters.noise.is_some()),
            fractional: matches!(experiment, Extension | Frequency),
        };
        let params = config.parameters.clone();
        validate_parameters(&params)?;
        let s = if experiment == Suite { None } else { Some(config.s()?) };
        if needs.fractional && s == Some(1.0) {
            return Err(ConfigError::Invalid(format!("{} needs s in (0, 1)", experiment.name())));
        }
        // frequency takes an optional grid for the SUCP report
        let wants_grid = needs.grid || (experiment == Frequency && config.grid.is_some());
        let grid = if wants_grid { Some(config.grid()?) } else { None };
        let coeff = grid.as_ref().map(|g| config.coefficient(g)).transpose()?;
        let mut partition = None;
        let (mut q1, mut q2) = (None, None);
        if needs.domain {
            let g = grid.as_ref().expect("domain experiments need a grid");
            let p = config.partition(g)?;
            if p.first_region().is_empty() {
                return Err(ConfigError::Invalid("domain.o1 selects no exterior nodes".into()));
            }
            if needs.both_regions && p.second_region().is_empty() {
                return Err(ConfigError::Invalid("domain.o2 selects no exterior nodes".into()));
            }
            q1 = Some(config.potential(1, g, &p)?);
            q2 = Some(config.potential(2, g, &p)?);
            partition = Some(p);
        }
        if experiment == Reconstruct && params.data_refinement.is_some_and(|r| r != 1 && r != 2) {
            return Err(ConfigError::Invalid("parameters.data_refinement must be 1 or 2".into()));
        }
        let seed = if needs.seed { Some(config.require_seed(cli_seed)?) } else { cli_seed.or(config.seed) };
        Ok(Setup {
            experiment,
            grid,
            coeff,
            s,
            partition,
            q1,
            q2,
            potentials_equal: config.potentials_equal(),
            seed,
            params,
            config: config.clone(),
        })
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn run(&self, out: &Path, parallel: bool) -> Result<Outcome, RunError> {
        match self.experiment {
            Experiment::Operator => self.operator(out),
            Experiment::Forward => self.forward(out),
            Experiment::Dnmap => self.dnmap(out),
            Experiment::Extension => self.extension(out),
            Experiment::Frequency => self.frequency(out),
            Experiment::Runge => self.runge(out),
            Experiment::Moments => self.moments(out),
            Experiment::Reconstruct => self.reconstruct(out),
            Experiment::Suite => self.suite(parallel),
        }
    }

    fn grid(&self) -> &Grid {
        self.grid.as_ref().expect("validated in setup")
    }

    fn coeff(&self) -> &CoefficientField {
        self.coeff.as_ref().expect("validated in setup")
    }

    fn s(&self) -> f64 {
        self.s.expect("validated in setup")
    }

    fn partition(&self) -> &DomainPartition {
        self.partition.as_ref().expect("validated in setup")
    }

    fn q(&self, which: usize) -> &Potential {
        if which == 1 { self.q1.as_ref() } else { self.q2.as_ref() }.expect("validated in setup")
    }

    fn header(&self) -> CsvHeader {
        CsvHeader::new(self.grid(), self.s())
    }

    fn operator(&self, out: &Path) -> Result<Outcome, RunError> {
        let mut o = Outcome::default();
        let grid = self.grid();
        let op = assemble_local_operator(grid, self.coeff())?;
        let decomp = eigendecompose(&op)?;
        let sc = spectral_checks(&op, &decomp)?;
        o.checks.push(Check::at_most("mass asymmetry of L", op.mass_asymmetry(), 1e-12));
        o.checks.push(Check::at_most("eigenvector orthonormality", sc.orthonormality, 1e-10));
        o.checks.push(Check::at_most("spectral reconstruction", sc.reconstruction, 1e-10));
        for ((a, b), r) in &sc.semigroup {
            o.checks.push(Check::at_most(format!("semigroup residual S({a})S({b})"), *r, 1e-10));
        }
        o.checks.push(Check::at_most("S(1) = L", sc.unit_power, 1e-12));
        o.checks.push(Check::at_most("S(1/2)^2 = L", sc.half_square, 1e-10));
        let s = self.s();
        let frac = fractional_power(&decomp, s)?;
        if s < 1.0 {
            let laws = kernel_laws(&frac);
            o.checks.push(Check::at_most("kernel asymmetry", laws.asymmetry, 1e-12));
            o.checks.push(Check::at_least("min off-diagonal kernel", laws.min_off_diagonal, -1e-12));
            if let Ok(slope) = kernel_decay_exponent(grid, &frac) {
                o.checks.push(Check::report("kernel decay exponent", slope));
                o.metric("decay_target", -(grid.dim() as f64 + 2.0 * s));
            }
            match kernel_from_heat(&decomp, s, &QuadratureSpec::default()) {
                Ok(k) => o.checks.push(Check::at_most("quadrature kernel vs extracted", relative_frobenius(&k, frac.kernel()), 1e-4)),
                Err(CoreError::QuadratureTail(msg)) => o.metric("quadrature_skipped", msg),
                Err(e) => return Err(e.into()),
            }
            write_matrix_csv(&out.join("kernel.csv"), &self.header(), frac.kernel())?;
            o.artifact("kernel.csv");
        }
        if grid.truncation() == fraclab_core::grid::Truncation::Reflecting {
            for t in [0.01, 0.1, 1.0] {
                o.checks.push(Check::at_most(format!("heat mass defect t={t}"), heat_mass_defect(&decomp, t)?, 1e-10));
            }
        }
        o.metric("lambda_min", decomp.eigenvalues()[0]);
        o.metric("lambda_max", decomp.max_eigenvalue());
        write_matrix_csv(&out.join("operator.csv"), &self.header(), op.matrix())?;
        write_matrix_csv(&out.join("fractional.csv"), &self.header(), frac.matrix())?;
        o.artifact("operator.csv");
        o.artifact("fractional.csv");
        Ok(o)
    }

    fn forward(&self, out: &Path) -> Result<Outcome, RunError> {
        let mut o = Outcome::default();
        let (grid, part, q) = (self.grid(), self.partition(), self.q(1));
        let seed = self.seed.expect("validated in setup");
        let trials = self.params.trials.unwrap_or(20);
        let decomp = eigendecompose(&assemble_local_operator(grid, self.coeff())?)?;
        let frac = fractional_power(&decomp, self.s())?;
        let report = eigenvalue_report(&frac, q, part, None)?;
        o.checks.push(Check::flag("zero is not a Dirichlet eigenvalue", !report.zero_is_eigenvalue));
        let shift = 0.7;
        let shifted = eigenvalue_report(&frac, &q.shifted(shift), part, None)?;
        let scale = report.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let defect = report
            .eigenvalues
            .iter()
            .zip(&shifted.eigenvalues)
            .map(|(a, b)| (b - a - shift).abs())
            .fold(0.0, f64::max);
        o.checks.push(Check::at_most("eigenvalue shift identity", defect / scale, 1e-10));
        o.metric("lowest_eigenvalues", report.eigenvalues.clone());
        let mut rng = seeded(seed);
        let mut worst = 0.0f64;
        let mut first = None;
        for _ in 0..trials {
            let g = smooth_exterior_datum(grid, part, &mut rng);
            let sol = solve_dirichlet(&frac, q, part, &g, None)?;
            worst = worst.max(sol.residual);
            first.get_or_insert(sol);
        }
        o.checks.push(Check::at_most("max interior residual", worst, 1e-10));
        let c = forward_bound_constant(grid, &frac, q, part, seed, trials)?;
        o.checks.push(Check::report("bound constant C", c));
        // same data family on the refined grid
        let fine = self.config.refined_grid()?;
        let fine_decomp = eigendecompose(&assemble_local_operator(&fine, &self.config.coefficient(&fine)?)?)?;
        let fine_frac = fractional_power(&fine_decomp, self.s())?;
        let fine_part = self.config.partition(&fine)?;
        let fine_q = self.config.potential(1, &fine, &fine_part)?;
        let c2 = forward_bound_constant(&fine, &fine_frac, &fine_q, &fine_part, seed, trials)?;
        o.checks.push(Check::report("bound constant C on refined grid", c2));
        o.checks.push(Check::at_most("|C(refined)/C - 1|", (c2 / c - 1.0).abs(), 0.2));
        if let Some(sol) = first {
            let cols = coordinate_columns(grid);
            let mut names: Vec<&str> = coordinate_names(grid);
            names.push("u");
            let mut refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
            refs.push(&sol.u);
            write_columns_csv(&out.join("solution.csv"), &self.header(), &names, &refs)?;
            o.artifact("solution.csv");
        }
        Ok(o)
    }

    fn dnmap(&self, out: &Path) -> Result<Outcome, RunError> {
        let mut o = Outcome::default();
        let (grid, part) = (self.grid(), self.partition());
        let (q1, q2) = (self.q(1), self.q(2));
        let trials = self.params.trials.unwrap_or(20);
        let decomp = eigendecompose(&assemble_local_operator(grid, self.coeff())?)?;
        let frac = fractional_power(&decomp, self.s())?;
        let dn = assemble_dn_map(&frac, q1, part)?;
        let ne = part.exterior().len();
        let mut rng = seeded(self.seed.expect("validated in setup"));
        let (mut sym, mut rep, mut ident) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..trials {
            let g: Vec<f64> = (0..ne).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h: Vec<f64> = (0..ne).map(|_| rng.random_range(-1.0..1.0)).collect();
            sym = sym.max(dn.symmetry_defect(&g, &h));
            let sol = solve_dirichlet(&frac, q1, part, &g, None)?;
            rep = rep.max(relative_l2(&dn_via_neumann(&frac, part, &sol, &g)?.dn, &dn.apply(&g)));
            let g1 = restrict(part, part.first_region(), &g);
            let g2 = restrict(part, part.second_region(), &h);
            ident = ident.max(integral_identity_residual(&frac, q1, q2, part, &g1, &g2)?.residual);
        }
        o.checks.push(Check::at_most("max symmetry defect", sym, 1e-10));
        o.checks.push(Check::at_most("Neumann representation vs matrix", rep, 1e-10));
        let tol = if self.potentials_equal { 1e-12 } else { 1e-9 };
        o.checks.push(Check::at_most("integral identity residual", ident, tol));
        o.metric("exterior_nodes", ne);
        write_matrix_csv(&out.join("dn_map.csv"), &self.header(), dn.matrix())?;
        o.artifact("dn_map.csv");
        Ok(o)
    }

    fn extension(&self, out: &Path) -> Result<Outcome, RunError> {
        let mut o = Outcome::default();
        let (grid, coeff, s) = (self.grid(), self.coeff(), self.s());
        let layers = self.params.layers.unwrap_or(256);
        let decomp = eigendecompose(&assemble_local_operator(grid, coeff)?)?;
        let datum: Vec<f64> = (0..grid.len())
            .map(|i| {
                let x = grid.coords(i);
                (-2.0 * x[..grid.dim()].iter().map(|v| v * v).sum::<f64>()).exp()
            })
            .collect();
        let a = trace_consistency(grid, coeff, &decomp, s, &datum, layers)?;
        let b = trace_consistency(grid, coeff, &decomp, s, &datum, 2 * layers)?;
        o.checks.push(Check::at_most(format!("trace error J={layers}"), a.weak_form, 0.05));
        o.checks.push(Check::report(format!("trace error J={}", 2 * layers), b.weak_form));
        o.checks.push(Check::at_most("error ratio under J -> 2J", b.weak_form / a.weak_form, 0.55));
        o.checks.push(Check::report("difference-quotient trace error", a.difference_quotient));
        o.checks.push(Check::at_most("Poisson normalization", poisson_normalization(s, &[0.01, 0.1, 1.0, 10.0]), 1e-8));
        o.checks.push(Check::at_most("variational vs Poisson field", poisson_agreement(grid, coeff, &decomp, s, &datum, layers)?, 0.02));
        let height = self.params.height.unwrap_or_else(|| default_height(&decomp));
        let eg = build_extension_grid(grid, None, s, height, layers, None)?;
        let op = assemble_extension_operator(&eg, coeff, s)?;
        let sol = solve_extension_dirichlet(&op, &datum, None)?;
        o.metric("height", height);
        o.metric("grading", eg.grading());
        write_extension_csv(&out.join("extension.csv"), &self.header(), grid, op.y_nodes(), sol.field())?;
        o.artifact("extension.csv");
        Ok(o)
    }

    fn frequency(&self, out: &Path) -> Result<Outcome, RunError> {
        let mut o = Outcome::default();
        let s = self.s();
        let header = CsvHeader { dim: 1, points_per_axis: 105, s, truncation: fraclab_core::grid::Truncation::Reflecting };
        for degree in [1u32, 2] {
            let (profile, doubling) = match &self.params.radii {
                None => homogeneous_profile(degree, s)?,
                Some(radii) => homogeneous_profile_at(degree, s, radii)?,
            };
            let d = degree as f64;
            let target = homogeneous_doubling_ratio(degree, 1, s);
            let n_err = profile.n.iter().map(|v| (v - d).abs() / d).fold(0.0, f64::max);
            let r_err = doubling.ratios.iter().map(|r| (r.1 - target).abs() / target).fold(0.0, f64::max);
            o.checks.push(Check::at_most(format!("degree {degree}: max |N - d|/d"), n_err, 0.1));
            o.checks.push(Check::at_most(format!("degree {degree}: doubling ratio error"), r_err, 0.15));
            o.checks.push(Check::report(format!("degree {degree}: smoothed vs sharp gap"), profile.quadrature_gap()));
            let name = format!("profile_degree{degree}.csv");
            write_profile_csv(&out.join(&name), &header, &profile)?;
            o.artifact(&name);
        }
        let (profile, doubling, off_plane) = variable_coefficient_profile()?;
        o.checks.push(Check::report("variable A: C*", doubling.c_star));
        o.checks.push(Check::report("variable A: max doubling ratio", doubling.max_ratio));
        o.checks.push(Check::flag("variable A: finite C* and doubling ratio", doubling.c_star.is_finite() && doubling.max_ratio.is_finite()));
        o.checks.push(Check::report("variable A: reflection residual", off_plane));
        let vheader = CsvHeader { dim: 1, points_per_axis: 129, s: 0.5, truncation: fraclab_core::grid::Truncation::Reflecting };
        write_profile_csv(&out.join("profile_variable.csv"), &vheader, &profile)?;
        o.artifact("profile_variable.csv");
        if let Some(grid) = &self.grid {
            // probe on nested centred windows of the configured grid
            let decomp = eigendecompose(&assemble_local_operator(grid, self.coeff())?)?;
            let frac = fractional_power(&decomp, s)?;
            let n = grid.len();
            for frac_size in [8usize, 4, 2, 1] {
                let k = (n / frac_size).max(1);
                let start = (n - k) / 2;
                let probe = sucp_probe(&frac, &(start..start + k).collect::<Vec<_>>(), None)?;
                o.checks.push(Check::report(format!("SUCP probe |O|={k}"), probe.value));
            }
        }
        Ok(o)
    }

    fn runge(&self, out: &Path) -> Result<Outcome, RunError> {
        let mut o = Outcome::default();
        let (grid, part, q) = (self.grid(), self.partition(), self.q(1));
        let decomp = eigendecompose(&assemble_local_operator(grid, self.coeff())?)?;
        let frac = fractional_power(&decomp, self.s())?;
        let mut controls = part.first_region().to_vec();
        if self.params.controls.as_deref() == Some("both") {
            controls.extend_from_slice(part.second_region());
        }
        let alphas = self.params.alphas.clone().unwrap_or_else(|| (2..=10).map(|k| 10f64.powi(-k)).collect());
        let target = vec![1.0; part.interior().len()];
        let solver = RungeSolver::new(&frac, q, part, &controls)?;
        let mut errors = Vec::new();
        let mut conds = Vec::new();
        let mut warnings = Vec::new();
        for &a in &alphas {
            let r = solver.solve(&target, a)?;
            errors.push(r.relative_error);
            conds.push(r.gram_condition);
            if let Some(w) = r.warning {
                warnings.push(w);
            }
        }
        let decreasing = errors.windows(2).all(|w| w[1] < w[0]);
        o.checks.push(Check::flag("error strictly decreasing in alpha", decreasing));
        o.checks.push(Check::at_most("final relative error", *errors.last().unwrap_or(&f64::NAN), self.params.tolerance.unwrap_or(0.05)));
        o.metric("controls", controls.len());
        o.metric("interior", target.len());
        o.metric("warnings", warnings);
        write_columns_csv(&out.join("runge.csv"), &self.header(), &["alpha", "relative_error", "gram_condition"], &[&alphas, &errors, &conds])?;
        o.artifact("runge.csv");
        Ok(o)
    }

    fn moments(&self, out: &Path) -> Result<Outcome, RunError> {
        let mut o = Outcome::default();
        let (grid, part) = (self.grid(), self.partition());
        let decomp = eigendecompose(&assemble_local_operator(grid, self.coeff())?)?;
        let frac = fractional_power(&decomp, self.s())?;
        let probes = indicator_probes(&frac, part, self.params.probes.unwrap_or(5).min(part.interior().len()))?;
        let alpha = self.params.alpha.unwrap_or(1e-8);
        let set = extract_moments(&frac, part, self.q(1), self.q(2), &probes, alpha, &MomentMode::Exact)?;
        o.checks.push(Check::at_most("identity consistency", set.consistency(), 1e-9));
        let scale = set.scale.iter().cloned().fold(0.0, f64::max);
        if self.potentials_equal {
            o.checks.push(Check::at_most("max|mu| / scale with q1 = q2", set.max_abs() / scale, 1e-9));
        } else {
            o.checks.push(Check::report("max|mu|", set.max_abs()));
        }
        o.checks.push(Check::report("unit control relative Runge error", set.unit_error));
        let k: Vec<f64> = (0..probes.len()).map(|i| i as f64).collect();
        write_columns_csv(
            &out.join("moments.csv"),
            &self.header(),
            &["k", "mu", "identity", "target", "budget", "runge_error"],
            &[&k, &set.mu, &set.identity, &set.target, &set.budget, &set.probe_errors],
        )?;
        o.artifact("moments.csv");
        Ok(o)
    }

    fn reconstruct(&self, out: &Path) -> Result<Outcome, RunError> {
        let mut o = Outcome::default();
        let (grid, part) = (self.grid(), self.partition());
        let (truth, init) = (self.q(1), self.q(2));
        let decomp = eigendecompose(&assemble_local_operator(grid, self.coeff())?)?;
        let frac = fractional_power(&decomp, self.s())?;
        let max_iter = self.params.max_iter.unwrap_or(25);
        let refinement = self.params.data_refinement.unwrap_or(1);
        let mut observed = if refinement == 2 {
            let fine = self.config.refined_grid()?;
            let fd = eigendecompose(&assemble_local_operator(&fine, &self.config.coefficient(&fine)?)?)?;
            let ff = fractional_power(&fd, self.s())?;
            let fp = self.config.partition(&fine)?;
            let fq = self.config.potential(1, &fine, &fp)?;
            // only the q-dependent part is transferred; the background map
            // carries O(h^-2s) near-diagonal terms that do not restrict
            let dn = restrict_dn_map(&assemble_dn_map(&ff, &fq, &fp)?, &fine, &fp, grid, part)?;
            let dn0 = restrict_dn_map(&assemble_dn_map(&ff, &Potential::zero(&fp), &fp)?, &fine, &fp, grid, part)?;
            dn - dn0 + assemble_dn_map(&frac, &Potential::zero(part), part)?.matrix()
        } else {
            assemble_dn_map(&frac, truth, part)?.matrix().clone()
        };
        let me: Vec<f64> = part.exterior().iter().map(|&i| frac.masses()[i]).collect();
        let result = match self.params.noise {
            Some(level) => {
                observed = add_multiplicative_noise(&observed, level, self.seed.expect("validated in setup"));
                let alphas = self.params.alphas.clone().unwrap_or_else(|| (1..=8).map(|k| 10f64.powi(-k)).collect());
                let delta = level * dn_norm(&observed, &me);
                o.metric("noise_estimate", delta);
                reconstruct_with_discrepancy(&frac, part, &observed, init, delta, 1.1, &alphas, max_iter)?
            }
            None => reconstruct_potential(&frac, part, &observed, init, self.params.alpha.unwrap_or(1e-12), max_iter)?,
        };
        let m = frac.masses();
        let w: Vec<f64> = part.interior().iter().map(|&i| m[i]).collect();
        let num: f64 = truth.difference(&result.q).iter().zip(&w).map(|(d, m)| d * d * m).sum();
        let den: f64 = truth.values().iter().zip(&w).map(|(d, m)| d * d * m).sum();
        let err = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
        let default_tol = if self.params.noise.is_some() { 0.3 } else { 0.1 };
        o.checks.push(Check::at_most("relative L2 error of q", err, self.params.tolerance.unwrap_or(default_tol)));
        o.checks.push(Check::flag("misfit nonincreasing", result.misfit_nonincreasing()));
        o.metric("iterations", result.iterations);
        o.metric("alpha", result.alpha);
        o.metric("converged", result.converged());
        o.metric("termination", format!("{:?}", result.termination));
        o.metric("misfit_history", result.misfit.clone());
        let x: Vec<f64> = part.interior().iter().map(|&i| grid.coords(i)[0]).collect();
        write_columns_csv(&out.join("q_hat.csv"), &self.header(), &["x", "q_true", "q_hat"], &[&x, truth.values(), result.q.values()])?;
        let it: Vec<f64> = (0..result.misfit.len()).map(|k| k as f64).collect();
        write_columns_csv(&out.join("misfit.csv"), &self.header(), &["iteration", "misfit"], &[&it, &result.misfit])?;
        o.artifact("q_hat.csv");
        o.artifact("misfit.csv");
        Ok(o)
    }

    fn suite(&self, parallel: bool) -> Result<Outcome, RunError> {
        let seed = self.seed.expect("validated in setup");
        let ids: Vec<usize> = (1..=CRITERIA).collect();
        let reports = if parallel {
            ids.par_iter().map(|&id| battery::run(id, seed)).collect::<Vec<_>>()
        } else {
            ids.iter().map(|&id| battery::run(id, seed)).collect()
        };
        let mut o = Outcome::default();
        let mut summary = BTreeMap::new();
        for r in reports {
            summary.insert(format!("{:02} {}", r.id, r.title), json!(if r.passed() { "PASS" } else { "FAIL" }));
            for mut c in r.checks {
                c.name = format!("criterion {} ({}): {}", r.id, r.title, c.name);
                o.checks.push(c);
            }
        }
        o.metric("criteria", Value::Object(summary.into_iter().collect()));
        Ok(o)
    }
}

fn validate_parameters(p: &Parameters) -> Result<(), ConfigError> {
    let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
    if p.trials == Some(0) {
        return bad("parameters.trials must be positive");
    }
    if p.layers.is_some_and(|l| l < 8) {
        return bad("parameters.layers must be at least 8");
    }
    if p.alphas.as_ref().is_some_and(|a| a.is_empty() || a.iter().any(|v| !(*v > 0.0))) {
        return bad("parameters.alphas must be a nonempty list of positive numbers");
    }
    if p.alpha.is_some_and(|a| !(a >= 0.0)) || p.noise.is_some_and(|n| !(n >= 0.0)) {
        return bad("parameters.alpha and parameters.noise must be nonnegative");
    }
    if p.controls.as_deref().is_some_and(|c| c != "o1" && c != "both") {
        return bad("parameters.controls must be \"o1\" or \"both\"");
    }
    if p.probes == Some(0) {
        return bad("parameters.probes must be positive");
    }
    Ok(())
}

fn restrict(part: &DomainPartition, nodes: &[usize], values: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; values.len()];
    for &i in nodes {
        let k = part.exterior_position(i).expect("region nodes are exterior");
        g[k] = values[k];
    }
    g
}

fn coordinate_columns(grid: &Grid) -> Vec<Vec<f64>> {
    (0..grid.dim()).map(|d| (0..grid.len()).map(|i| grid.coords(i)[d]).collect()).collect()
}

fn coordinate_names(grid: &Grid) -> Vec<&'static str> {
    if grid.dim() == 2 { vec!["x0", "x1"] } else { vec!["x"] }
}
