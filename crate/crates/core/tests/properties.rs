use fraclab_core::assembly::assemble_local_operator;
use fraclab_core::diagnostics::sucp_probe;
use fraclab_core::extension::poisson_multiplier;
use fraclab_core::grid::{partition_domain, sample_coefficient, CoefficientSpec, Grid, Region, Truncation};
use fraclab_core::inverse::{extract_moments, indicator_probes, MomentMode, RungeSolver};
use fraclab_core::nonlocal::{assemble_dn_map, solve_dirichlet, Potential};
use fraclab_core::spectral::{eigendecompose, fractional_power, heat_kernel, FractionalOperator, SpectralDecomposition};
use nalgebra::{DMatrix, DVector, Matrix2};
use proptest::prelude::*;

fn sine_field(dim: usize, amplitude: f64, phase: f64) -> CoefficientSpec {
    CoefficientSpec::diagonal((0..dim).map(|d| move |x: &[f64]| 1.0 + amplitude * (x[d] + phase).sin()).collect())
}

fn setup_1d(points: usize, amplitude: f64, phase: f64) -> (Grid, SpectralDecomposition) {
    let grid = Grid::build(1, 2.0, points, Truncation::Reflecting).unwrap();
    let coeff = sample_coefficient(&grid, &sine_field(1, amplitude, phase)).unwrap();
    let decomp = eigendecompose(&assemble_local_operator(&grid, &coeff).unwrap()).unwrap();
    (grid, decomp)
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

fn vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masses_sum_to_box_volume(dim in 1usize..=2, points in 3usize..40, half in 0.5..5.0f64, reflecting: bool) {
        let t = if reflecting { Truncation::Reflecting } else { Truncation::Absorbing };
        let grid = Grid::build(dim, half, points, t).unwrap();
        let total: f64 = grid.masses().iter().sum();
        let volume = (2.0 * half).powi(dim as i32);
        prop_assert!((total - volume).abs() <= 1e-12 * volume);
    }

    #[test]
    fn partition_covers_every_node_once(radius in 0.2..1.2f64, center in -0.5..0.5f64, gap in 0.05..0.5f64) {
        let grid = Grid::build(1, 3.0, 49, Truncation::Reflecting).unwrap();
        let omega = Region::ball(&[center], radius);
        let o1 = Region::interval(center + radius + gap, 2.9);
        let part = partition_domain(&grid, &omega, Some(&o1), None).unwrap();
        let mut seen = vec![0usize; grid.len()];
        for &i in part.interior().iter().chain(part.exterior()) {
            seen[i] += 1;
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        prop_assert!(part.first_region().iter().all(|&i| !part.is_interior(i)));
    }

    #[test]
    fn sampled_coefficient_respects_ellipticity(
        a in 0.1..2.0f64, b in 0.1..2.0f64, c in -0.5..0.5f64, xi in prop::collection::vec(-1.0..1.0f64, 200),
    ) {
        let grid = Grid::build(2, 1.0, 5, Truncation::Reflecting).unwrap();
        let c = c * (a * b).sqrt();
        let spec = CoefficientSpec::full(move |x: &[f64]| Matrix2::new(a + 0.1 * x[0].cos(), c, c, b), 100.0);
        let field = sample_coefficient(&grid, &spec).unwrap();
        let lam = field.ellipticity();
        for i in 0..grid.len() {
            let m = field.at(i);
            for pair in xi.chunks(2) {
                let v = nalgebra::Vector2::new(pair[0], pair[1]);
                let q = v.dot(&(m * v));
                let n2 = v.norm_squared();
                prop_assert!(q >= n2 / lam - 1e-12 && q <= lam * n2 + 1e-12);
            }
        }
    }

    #[test]
    fn operator_is_mass_symmetric_and_psd(amp in 0.0..0.8f64, phase in 0.0..6.3f64, dim in 1usize..=2) {
        let points = if dim == 1 { 25 } else { 7 };
        let grid = Grid::build(dim, 2.0, points, Truncation::Reflecting).unwrap();
        let coeff = sample_coefficient(&grid, &sine_field(dim, amp, phase)).unwrap();
        let op = assemble_local_operator(&grid, &coeff).unwrap();
        prop_assert!(op.mass_asymmetry() < 1e-12);
        let decomp = eigendecompose(&op).unwrap();
        prop_assert!(decomp.eigenvalues()[0] > -1e-10 * decomp.max_eigenvalue());
    }

    #[test]
    fn discrete_maximum_principle(amp in 0.0..0.8f64, data in prop::collection::vec(0.0..1.0f64, 16)) {
        let grid = Grid::build(1, 2.0, 33, Truncation::Reflecting).unwrap();
        let coeff = sample_coefficient(&grid, &sine_field(1, amp, 0.3)).unwrap();
        let l = assemble_local_operator(&grid, &coeff).unwrap().matrix().clone();
        // free nodes in the middle, prescribed values in [0,1] elsewhere
        let free: Vec<usize> = (8..25).collect();
        let fixed: Vec<usize> = (0..33).filter(|i| !free.contains(i)).collect();
        let a = DMatrix::from_fn(free.len(), free.len(), |r, c| l[(free[r], free[c])]);
        let rhs = DVector::from_fn(free.len(), |r, _| {
            -fixed.iter().enumerate().map(|(k, &j)| l[(free[r], j)] * data[k]).sum::<f64>()
        });
        let u = a.lu().solve(&rhs).unwrap();
        prop_assert!(u.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn fractional_semigroup(s1 in 0.05..0.6f64, frac in 0.0..1.0f64, amp in 0.0..0.5f64) {
        let s2 = frac * (1.0 - s1).min(0.9);
        prop_assume!(s2 > 0.01);
        let (_, d) = setup_1d(33, amp, 0.0);
        let p = |s: f64| fractional_power(&d, s).unwrap().matrix().clone();
        prop_assert!(rel(&(p(s1) * p(s2)), &p(s1 + s2)) < 1e-10);
    }

    #[test]
    fn heat_semigroup_and_positivity(t1 in 0.001..1.0f64, t2 in 0.001..1.0f64, amp in 0.0..0.5f64) {
        let (_, d) = setup_1d(33, amp, 1.0);
        let m = DMatrix::from_diagonal(&DVector::from_column_slice(d.masses()));
        let (p1, p2, p12) = (heat_kernel(&d, t1).unwrap(), heat_kernel(&d, t2).unwrap(), heat_kernel(&d, t1 + t2).unwrap());
        prop_assert!(rel(&(&p1 * &m * &p2), &p12) < 1e-10);
        prop_assert!((&p1 - p1.transpose()).amax() < 1e-12 * p1.amax());
        prop_assert!(p1.iter().all(|&v| v >= -1e-12 * p1.amax()));
    }

    #[test]
    fn kernel_reproduces_the_form(s in 0.1..0.95f64, f in vector(33), g in vector(33)) {
        let (_, d) = setup_1d(33, 0.3, 0.5);
        let op: FractionalOperator = fractional_power(&d, s).unwrap();
        let k = op.kernel();
        prop_assert!((k - k.transpose()).amax() < 1e-12 * k.amax());
        let (a, b) = (op.pairing(&f, &g), op.dirichlet_form(&f, &g));
        prop_assert!((a - b).abs() <= 1e-10 * (op.pairing(&f, &f).abs() + op.pairing(&g, &g).abs() + 1e-300));
    }
}

fn domain(points: usize) -> (Grid, SpectralDecomposition, fraclab_core::grid::DomainPartition) {
    let (grid, d) = setup_1d(points, 0.3, 0.0);
    let part = partition_domain(
        &grid,
        &Region::ball(&[0.0], 0.5),
        Some(&Region::interval(0.75, 1.75)),
        Some(&Region::interval(-1.75, -0.75)),
    )
    .unwrap();
    (grid, d, part)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forward_solution_keeps_exterior_data(s in 0.1..0.95f64, q in 0.0..2.0f64, g in vector(33)) {
        let (_, d, part) = domain(33);
        let frac = fractional_power(&d, s).unwrap();
        let g = &g[..part.exterior().len()];
        let sol = solve_dirichlet(&frac, &Potential::constant(&part, q), &part, g, None).unwrap();
        for (b, &i) in part.exterior().iter().enumerate() {
            prop_assert_eq!(sol.u[i], g[b]);
        }
        prop_assert!(sol.residual < 1e-10);
    }

    #[test]
    fn dn_map_is_symmetric(s in 0.1..0.95f64, q in 0.0..2.0f64, g in vector(33), h in vector(33)) {
        let (grid, d, part) = domain(33);
        let frac = fractional_power(&d, s).unwrap();
        let ne = part.exterior().len();
        let pot = Potential::from_fn(&grid, &part, |x| q * (1.0 + x[0]));
        let dn = assemble_dn_map(&frac, &pot, &part).unwrap();
        prop_assert!(dn.symmetry_defect(&g[..ne], &h[..ne]) < 1e-10);
    }

    #[test]
    fn sucp_probe_grows_with_the_set(s in 0.2..0.9f64, start in 0usize..20, extra in 1usize..8) {
        let (_, d) = setup_1d(33, 0.2, 0.0);
        let frac = fractional_power(&d, s).unwrap();
        let small: Vec<usize> = (start..start + 3).collect();
        let large: Vec<usize> = (start..(start + 3 + extra).min(33)).collect();
        let a = sucp_probe(&frac, &small, None).unwrap().value;
        let b = sucp_probe(&frac, &large, None).unwrap().value;
        prop_assert!(b >= a - 1e-12 * (1.0 + a.abs()));
    }

    #[test]
    fn more_controls_approximate_no_worse(s in 0.2..0.9f64, alpha_exp in 2i32..9) {
        let (_, d, part) = domain(33);
        let frac = fractional_power(&d, s).unwrap();
        let q = Potential::zero(&part);
        let target = vec![1.0; part.interior().len()];
        let alpha = 10f64.powi(-alpha_exp);
        let o1 = part.first_region().to_vec();
        let mut both = o1.clone();
        both.extend_from_slice(part.second_region());
        let a = RungeSolver::new(&frac, &q, &part, &o1).unwrap().solve(&target, alpha).unwrap();
        let b = RungeSolver::new(&frac, &q, &part, &both).unwrap().solve(&target, alpha).unwrap();
        prop_assert!(b.error <= a.error * (1.0 + 1e-9));
    }

    #[test]
    fn moments_match_the_identity(s in 0.2..0.9f64, c1 in 0.0..2.0f64, c2 in 0.0..2.0f64) {
        let (grid, d, part) = domain(33);
        let frac = fractional_power(&d, s).unwrap();
        let q1 = Potential::from_fn(&grid, &part, |x| c1 * (1.0 - x[0] * x[0]));
        let q2 = Potential::constant(&part, c2);
        let probes = indicator_probes(&frac, &part, 3).unwrap();
        let set = extract_moments(&frac, &part, &q1, &q2, &probes, 1e-8, &MomentMode::Exact).unwrap();
        prop_assert!(set.consistency() <= 1e-9);
    }

    #[test]
    fn poisson_multiplier_is_normalized(s in 0.05..0.95f64, y in 1e-3..50.0f64) {
        prop_assert!((poisson_multiplier(s, y, 0.0) - 1.0).abs() < 1e-12);
    }
}
