use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use stark_tomo::electrostatics::{BasisFields, ChargeDensities, PotentialSet};
use stark_tomo::grid::{GridSpec, ScalarGrid, Unit, VectorGrid};
use stark_tomo::reconstruction::*;

fn mags(applied: &[[f64; 2]], s: [f64; 2]) -> Vec<f64> {
    applied.iter().map(|f| (f[0] + s[0]).hypot(f[1] + s[1])).collect()
}

/// Three applied fields and a stray vector for which both the pairwise
/// system and the magnitude Jacobian have condition numbers below
/// `max_cond`.
fn random_instance(rng: &mut ChaCha8Rng, max_cond: f64) -> (Vec<[f64; 2]>, [f64; 2]) {
    loop {
        let f: Vec<[f64; 2]> = (0..3)
            .map(|_| [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)])
            .collect();
        let s = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
        if pairwise_condition(&f) < max_cond && magnitude_condition(&f, s) < max_cond {
            return (f, s);
        }
    }
}

#[test]
fn search_agrees_with_closed_form_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let opts = SearchOptions {
        bounds: Bounds::symmetric(0.5),
        ..SearchOptions::default()
    };
    let n = 10_000;
    let mut worst = 0.0f64;
    for k in 0..n {
        let (f, s) = random_instance(&mut rng, 10.0);
        let m = mags(&f, s);
        let closed = reconstruct_pixel_closed(&f, &m).unwrap();
        let mut prng = ChaCha8Rng::seed_from_u64(k as u64);
        let out = reconstruct_pixel_search(&f, &m, &opts, &mut prng);
        worst = worst.max((out.stray[0] - closed[0]).hypot(out.stray[1] - closed[1]));
    }
    assert!(worst < 1e-3, "worst disagreement {worst}");
}

#[test]
fn three_d_recovery_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let f: Vec<[f64; 3]> = (0..4)
            .map(|_| std::array::from_fn(|_| rng.random_range(-0.2..0.2)))
            .collect();
        let s: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.1..0.1));
        let m: Vec<f64> = f
            .iter()
            .map(|v| (0..3).map(|c| (v[c] + s[c]).powi(2)).sum::<f64>().sqrt())
            .collect();
        match reconstruct_3d(&f, &m) {
            Ok(r) => {
                for c in 0..3 {
                    assert!((r[c] - s[c]).abs() < 1e-9, "{r:?} vs {s:?}");
                }
            }
            Err(PixelFailure::IllConditioned { .. }) => {}
            Err(e) => panic!("{e:?}"),
        }
    }
}

#[test]
fn three_d_grid_scan_confirms_unique_minimum() {
    let f = [
        [0.1, 0.0, 0.02],
        [0.0, 0.1, -0.03],
        [-0.05, 0.02, 0.1],
        [0.04, -0.07, 0.0],
    ];
    let s: [f64; 3] = [0.02, -0.01, 0.05];
    let m: Vec<f64> = f
        .iter()
        .map(|v| (0..3).map(|c| (v[c] + s[c]).powi(2)).sum::<f64>().sqrt())
        .collect();
    let cost = |p: [f64; 3]| -> f64 {
        f.iter()
            .zip(&m)
            .map(|(v, mi)| ((0..3).map(|c| (v[c] + p[c]).powi(2)).sum::<f64>().sqrt() - mi).powi(2))
            .sum()
    };
    let step = 0.005;
    let mut best = ([0.0; 3], f64::MAX);
    for i in -30..=30 {
        for j in -30..=30 {
            for k in -30..=30 {
                let p = [i as f64 * step, j as f64 * step, k as f64 * step];
                let c = cost(p);
                if c < best.1 {
                    best = (p, c);
                }
            }
        }
    }
    let r = reconstruct_3d(&f, &m).unwrap();
    for c in 0..3 {
        assert!((best.0[c] - r[c]).abs() <= step, "{:?} {r:?}", best.0);
    }
}

#[test]
fn noisy_search_stays_within_three_sigma() {
    // σ_m = 2 mV/cm on each magnitude; the spread of the estimate follows
    // from the linearised sensitivity of the three magnitudes to the stray.
    let f = vec![[0.10, 0.02], [-0.03, 0.08], [0.05, -0.09]];
    let truth = [0.030, -0.040];
    let sigma = 0.002;
    let noise = Normal::new(0.0, sigma).unwrap();
    let m0 = mags(&f, truth);
    let jac = nalgebra::DMatrix::from_fn(3, 2, |r, c| (f[r][c] + truth[c]) / m0[r]);
    let cov = (jac.transpose() * &jac).try_inverse().unwrap() * (sigma * sigma);
    let sd = [cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt()];
    let opts = SearchOptions {
        bounds: Bounds::symmetric(1.0),
        ..SearchOptions::default()
    };
    let trials = 500;
    let mut inside = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for k in 0..trials {
        let m: Vec<f64> = m0.iter().map(|v| v + noise.sample(&mut rng)).collect();
        let out = reconstruct_pixel_search(&f, &m, &opts, &mut ChaCha8Rng::seed_from_u64(k));
        assert!(out.residual < 5.0 * sigma, "{}", out.residual);
        if (out.stray[0] - truth[0]).abs() < 3.0 * sd[0] && (out.stray[1] - truth[1]).abs() < 3.0 * sd[1] {
            inside += 1;
        }
    }
    assert!(inside as f64 >= 0.95 * trials as f64, "{inside}/{trials}");
}

#[test]
fn search_is_deterministic_for_a_seed() {
    let f = vec![[0.10, 0.02], [-0.03, 0.08], [0.05, -0.09]];
    let m = mags(&f, [0.01, 0.02]);
    let opts = SearchOptions::default();
    let a = reconstruct_pixel_search(&f, &m, &opts, &mut ChaCha8Rng::seed_from_u64(5));
    let b = reconstruct_pixel_search(&f, &m, &opts, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn residual_is_gauge_invariant(
        fs in prop::collection::vec((-0.2f64..0.2, -0.2f64..0.2), 3..6),
        s in (-0.1f64..0.1, -0.1f64..0.1),
        c in (-0.5f64..0.5, -0.5f64..0.5),
        probe in (-0.1f64..0.1, -0.1f64..0.1),
    ) {
        let f: Vec<[f64; 2]> = fs.iter().map(|v| [v.0, v.1]).collect();
        let m = mags(&f, [s.0, s.1]);
        let shifted: Vec<[f64; 2]> = f.iter().map(|v| [v[0] + c.0, v[1] + c.1]).collect();
        let a = pixel_residual(&f, &m, [probe.0, probe.1]);
        let b = pixel_residual(&shifted, &m, [probe.0 - c.0, probe.1 - c.1]);
        prop_assert!((a - b).abs() < 1e-12);
        if let (Ok(r1), Ok(r2)) = (reconstruct_pixel_closed(&f, &m), reconstruct_pixel_closed(&shifted, &m)) {
            prop_assert!((r1[0] - (r2[0] + c.0)).abs() < 1e-6 * (1.0 + pairwise_condition(&f)));
            prop_assert!((r1[1] - (r2[1] + c.1)).abs() < 1e-6 * (1.0 + pairwise_condition(&f)));
        }
    }
}

/// Small synthetic basis with smooth analytic fields, so that map-level
/// operations can be checked without a Poisson solve.
fn toy_basis() -> BasisFields {
    let spec = GridSpec::new(12, 10, 10.0, 10.0, -55.0, 100.0).unwrap();
    let field = |fx: &dyn Fn(f64, f64) -> f64, fy: &dyn Fn(f64, f64) -> f64| {
        let mut g = VectorGrid::zeros(spec);
        for i in 0..spec.len() {
            let (ix, iy) = spec.coords(i);
            let (x, y) = (spec.x(ix) * 1e-2, spec.y(iy) * 1e-2);
            g.fx[i] = fx(x, y);
            g.fy[i] = fy(x, y);
        }
        g
    };
    BasisFields {
        spec,
        geometry_hash: "toy".into(),
        electrodes: [
            field(&|x, y| 0.1 * x / y, &|_, y| -0.2 / y),
            field(&|x, _| 0.03 + 0.01 * x, &|_, y| 0.05 / y),
            field(&|x, _| -0.03 + 0.01 * x, &|_, y| 0.04 / y),
            field(&|_, _| 0.002, &|_, y| -0.01 * y),
        ],
        charges: [
            // V/cm per C/m², so that µC/m² gives fields of order 0.1 V/cm
            field(&|x, y| -500.0 * x / (y * y), &|_, y| 800.0 / y),
            field(&|x, _| 1e3 * x, &|_, _| 2e3),
        ],
    }
}

fn toy_charges() -> ChargeDensities {
    ChargeDensities {
        sigma_g: -23.6e-6,
        sigma_s: -2.10e-6,
    }
}

fn toy_sets() -> Vec<PotentialSet> {
    vec![
        PotentialSet::new("a", 4.00, -0.02, 0.00, -0.11),
        PotentialSet::new("b", 3.50, 0.60, 0.00, -0.11),
        PotentialSet::new("c", 3.87, 0.00, -0.70, 0.40),
        PotentialSet::new("d", 3.92, -0.31, 0.25, -0.11),
    ]
}

fn in_plane(basis: &BasisFields, p: &PotentialSet, stray: &VectorGrid) -> ScalarGrid {
    let mut t = basis.applied(p);
    t.add_scaled(stray, 1.0).unwrap();
    t.magnitude()
}

#[test]
fn map_reconstruction_and_validation_close_on_toy_basis() {
    let basis = toy_basis();
    let stray = basis.stray(&toy_charges());
    let sets = toy_sets();
    let meas: Vec<Measurement> = sets[..3]
        .iter()
        .map(|p| Measurement::from_basis(p.clone(), &basis, in_plane(&basis, p, &stray)).unwrap())
        .collect();
    let res = reconstruct_stray(&meas, 0.0, &ReconOptions::default()).unwrap();
    for i in 0..basis.spec.len() {
        assert!(!res.stray.mask[i]);
        assert!((res.stray.fx[i] - stray.fx[i]).abs() < 1e-9);
        assert!((res.stray.fy[i] - stray.fy[i]).abs() < 1e-9);
        assert!(res.residual.values[i] >= 0.0 && res.residual.values[i] < 1e-9);
    }
    let measured = in_plane(&basis, &sets[3], &stray);
    let dev = validate_superposition(&res.stray, &sets[3], &basis, &measured).unwrap();
    assert!(dev.max_abs < 1e-9);
    let zero = VectorGrid::zeros(basis.spec);
    let dev0 = validate_superposition(&zero, &sets[3], &basis, &measured).unwrap();
    assert!(dev0.max_abs > 1e-4);
}

#[test]
fn zero_stray_campaign_reconstructs_zero() {
    let basis = toy_basis();
    let zero = VectorGrid::zeros(basis.spec);
    let meas: Vec<Measurement> = toy_sets()[..3]
        .iter()
        .map(|p| Measurement::from_basis(p.clone(), &basis, in_plane(&basis, p, &zero)).unwrap())
        .collect();
    let res = reconstruct_stray(&meas, 0.0, &ReconOptions::default()).unwrap();
    let worst = res.stray.magnitude().unmasked().map(|x| x.1).fold(0.0, f64::max);
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn reconstruction_rejects_too_few_and_duplicate_measurements() {
    let basis = toy_basis();
    let zero = VectorGrid::zeros(basis.spec);
    let sets = toy_sets();
    let m = |p: &PotentialSet| Measurement::from_basis(p.clone(), &basis, in_plane(&basis, p, &zero)).unwrap();
    assert!(matches!(
        reconstruct_stray(&[m(&sets[0]), m(&sets[1])], 0.0, &ReconOptions::default()),
        Err(ReconError::TooFewMeasurements { .. })
    ));
    assert!(matches!(
        reconstruct_stray(&[m(&sets[0]), m(&sets[1]), m(&sets[1])], 0.0, &ReconOptions::default()),
        Err(ReconError::DuplicateLabel(_))
    ));
}

#[test]
fn masked_magnitudes_propagate() {
    let basis = toy_basis();
    let stray = basis.stray(&toy_charges());
    let mut meas: Vec<Measurement> = toy_sets()
        .iter()
        .map(|p| Measurement::from_basis(p.clone(), &basis, in_plane(&basis, p, &stray)).unwrap())
        .collect();
    // one of four maps missing: three remain
    meas[0].magnitude.mask[5] = true;
    // two of four maps missing: masked
    meas[1].magnitude.mask[7] = true;
    meas[2].magnitude.mask[7] = true;
    let res = reconstruct_stray(&meas, 0.0, &ReconOptions::default()).unwrap();
    assert!(!res.stray.mask[5]);
    assert!(res.stray.mask[7] && res.residual.mask[7]);
}

#[test]
fn charge_fit_recovers_generating_densities() {
    let basis = toy_basis();
    let q = toy_charges();
    let stray = basis.stray(&q);
    let fz = 0.05;
    let sets = toy_sets();
    let totals: Vec<ScalarGrid> = sets[..3]
        .iter()
        .map(|p| in_plane(&basis, p, &stray).map(Unit::VoltPerCm, |m| m.hypot(fz)))
        .collect();
    let inputs: Vec<ChargeFitInput> = totals
        .iter()
        .zip(&sets)
        .map(|(m, p)| ChargeFitInput { magnitude: m, pots: p })
        .collect();
    let fit = fit_charge_densities(&inputs, &basis, fz).unwrap();
    assert!(fit.converged);
    assert!((fit.charges.sigma_g / q.sigma_g - 1.0).abs() < 1e-6, "{fit:?}");
    assert!((fit.charges.sigma_s / q.sigma_s - 1.0).abs() < 1e-6, "{fit:?}");
}

#[test]
fn charge_fit_with_gap_charge_only_finds_no_surface_charge() {
    let basis = toy_basis();
    let q = ChargeDensities {
        sigma_g: -23.6e-6,
        sigma_s: 0.0,
    };
    let stray = basis.stray(&q);
    let fz = 0.05;
    let noise = Normal::new(0.0, 0.002).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let sets = toy_sets();
    let totals: Vec<ScalarGrid> = sets[..3]
        .iter()
        .map(|p| {
            let mut g = in_plane(&basis, p, &stray).map(Unit::VoltPerCm, |m| m.hypot(fz));
            g.values.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            g
        })
        .collect();
    let inputs: Vec<ChargeFitInput> = totals
        .iter()
        .zip(&sets)
        .map(|(m, p)| ChargeFitInput { magnitude: m, pots: p })
        .collect();
    let fit = fit_charge_densities(&inputs, &basis, fz).unwrap();
    assert!(fit.charges.sigma_s.abs() < 3.0 * fit.std_errors[1], "{fit:?}");
    assert!(
        (fit.charges.sigma_g - q.sigma_g).abs() < 3.0 * fit.std_errors[0],
        "{fit:?}"
    );
}

#[test]
fn charge_fit_on_zero_charge_finds_zero() {
    let basis = toy_basis();
    let zero = VectorGrid::zeros(basis.spec);
    let fz = 0.05;
    let sets = toy_sets();
    let totals: Vec<ScalarGrid> = sets[..3]
        .iter()
        .map(|p| in_plane(&basis, p, &zero).map(Unit::VoltPerCm, |m| m.hypot(fz)))
        .collect();
    let inputs: Vec<ChargeFitInput> = totals
        .iter()
        .zip(&sets)
        .map(|(m, p)| ChargeFitInput { magnitude: m, pots: p })
        .collect();
    let fit = fit_charge_densities(&inputs, &basis, fz).unwrap();
    assert!(
        fit.charges.sigma_g.abs() < 1e-12 && fit.charges.sigma_s.abs() < 1e-12,
        "{fit:?}"
    );
}

#[test]
fn compensation_of_zero_stray_is_zero() {
    let basis = toy_basis();
    let zero = VectorGrid::zeros(basis.spec);
    let region = vec![true; basis.spec.len()];
    let c = compensate(&zero, &basis, &region, None, "comp").unwrap();
    assert!(c.pots.as_array().iter().all(|v| v.abs() < 1e-12), "{}", c.pots);
}

#[test]
fn single_pixel_region_cancels_exactly() {
    let basis = toy_basis();
    let stray = basis.stray(&toy_charges());
    let mut region = vec![false; basis.spec.len()];
    let i = basis.spec.index(4, 6);
    region[i] = true;
    let c = compensate(&stray, &basis, &region, None, "comp").unwrap();
    assert!(c.residual.values[i] < 1e-12, "{}", c.residual.values[i]);
    assert!(c.reduction > 1e6);
}

#[test]
fn bounded_compensation_respects_bounds() {
    let basis = toy_basis();
    let stray = basis.stray(&toy_charges()).scaled(50.0);
    let region = vec![true; basis.spec.len()];
    let bounds = [(-1.0, 1.0), (-0.5, 0.5), (-0.5, 0.5), (-0.2, 0.0)];
    let c = compensate(&stray, &basis, &region, Some(bounds), "comp").unwrap();
    for (v, (lo, hi)) in c.pots.as_array().iter().zip(&bounds) {
        assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12, "{}", c.pots);
    }
    let free = compensate(&stray, &basis, &region, None, "comp").unwrap();
    assert!(c.region_rms >= free.region_rms - 1e-12);
}

fn region_cost(basis: &BasisFields, stray: &VectorGrid, pots: &PotentialSet, region: &[bool]) -> f64 {
    let mut t = basis.applied(pots);
    t.add_scaled(stray, 1.0).unwrap();
    (0..basis.spec.len())
        .filter(|i| region[*i])
        .map(|i| t.fx[i] * t.fx[i] + t.fy[i] * t.fy[i])
        .sum()
}

proptest! {
    #[test]
    fn compensation_never_increases_cost(
        sg in -5e-5f64..5e-5,
        ss in -5e-6f64..5e-6,
        picks in prop::collection::vec(any::<bool>(), 120),
        bounded in any::<bool>(),
    ) {
        let basis = toy_basis();
        let stray = basis.stray(&ChargeDensities { sigma_g: sg, sigma_s: ss });
        let mut region = picks.clone();
        region[0] = true;
        let bounds = bounded.then_some([(-1.0, 1.0); 4]);
        let c = compensate(&stray, &basis, &region, bounds, "comp").unwrap();
        let before = region_cost(&basis, &stray, &PotentialSet::zero("zero"), &region);
        let after = region_cost(&basis, &stray, &c.pots, &region);
        prop_assert!(after <= before * (1.0 + 1e-12) + 1e-30);
    }
}
