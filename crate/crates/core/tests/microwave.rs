use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use stark_tomo::electrostatics::{compute_basis, DeviceGeometry, Relaxation, SolverSettings};
use stark_tomo::grid::{GridSpec, ScalarGrid, Unit};
use stark_tomo::microwave::*;
use stark_tomo::stark::StarkConstants;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

proptest! {
    #[test]
    fn population_stays_in_unit_interval(
        theta in 0.0..5e-3f64,
        s in 0.0..50.0f64,
        det in -20.0..20.0f64,
        t in 0.0..2000.0f64,
        tau in 10.0..1e5f64,
    ) {
        let p = transfer_probability(theta, s, det, t, tau);
        prop_assert!((0.0..=1.0).contains(&p), "{p}");
    }

    #[test]
    fn resonant_undamped_transfer_is_periodic_in_pulse_length(
        theta in 1e-4..3e-3f64,
        s in 1.0..30.0f64,
        t in 0.0..800.0f64,
    ) {
        let period = TWO_PI / (s * theta);
        let a = transfer_probability(theta, s, 0.0, t, f64::INFINITY);
        let b = transfer_probability(theta, s, 0.0, t + period, f64::INFINITY);
        prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn effective_rate_adds_in_quadrature(det in -30.0..30.0f64, f in 0.0..5.0f64) {
        let k = StarkConstants::default();
        let e = effective_rate(det, f, &k);
        let want = angular_detuning(det).powi(2) + rabi_rate(f, &k).powi(2);
        prop_assert!((e * e - want).abs() <= 1e-12 * want.max(1e-12));
    }

    #[test]
    fn only_the_rabi_frequency_matters(
        theta in 1e-4..3e-3f64,
        s in 1.0..30.0f64,
        c in 0.1..10.0f64,
        det in -2.0..2.0f64,
    ) {
        let a = transfer_probability(theta, s, det, 400.0, 2000.0);
        let b = transfer_probability(c * theta, s / c, det, 400.0, 2000.0);
        prop_assert!((a - b).abs() < 1e-12);
    }
}

fn sweep_curve(s: f64, det: f64, thetas: &[f64], noise: Option<(&Normal<f64>, &mut ChaCha8Rng)>) -> RabiCurve {
    let mut populations: Vec<f64> = thetas
        .iter()
        .map(|&t| transfer_probability(t, s, det, 400.0, 2000.0))
        .collect();
    if let Some((n, rng)) = noise {
        for p in &mut populations {
            *p += n.sample(rng);
        }
    }
    RabiCurve {
        thetas: thetas.to_vec(),
        populations,
        ix: 0,
        iy: 0,
        pulse_ns: 400.0,
        detuning: det,
    }
}

#[test]
fn noisy_fits_cover_truth_at_three_standard_errors() {
    let thetas = theta_sweep(2.4e-3, 81).unwrap();
    let noise = Normal::new(0.0, 0.03).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let opts = RabiFitOptions::default();
    let trials = 1000;
    let mut covered = 0;
    for k in 0..trials {
        let s = 8.0 + 10.0 * k as f64 / trials as f64;
        let fit = fit_s(&sweep_curve(s, 0.0, &thetas, Some((&noise, &mut rng))), &opts);
        assert_eq!(fit.status, RabiStatus::Ok, "trial {k}");
        if (fit.s - s).abs() <= 3.0 * fit.std_error {
            covered += 1;
        }
    }
    let rate = covered as f64 / trials as f64;
    assert!(rate >= 0.95, "coverage {rate}");
}

#[test]
fn noiseless_fit_is_exact_over_detunings() {
    let thetas = theta_sweep(2.4e-3, 81).unwrap();
    for det in [-0.5, -0.2, 0.0, 0.3, 0.5] {
        for s in [9.0, 13.17, 17.0] {
            let fit = fit_s(&sweep_curve(s, det, &thetas, None), &RabiFitOptions::default());
            assert_eq!(fit.status, RabiStatus::Ok, "{det} {s}");
            assert!((fit.s / s - 1.0).abs() < 1e-8, "{det} {s}: {}", fit.s);
        }
    }
}

#[test]
fn detuned_fits_find_the_global_minimum() {
    // detunings near the π-pulse rate give side minima in the cost
    let thetas = theta_sweep(2.4e-3, 81).unwrap();
    let mut fitted = 0;
    for det in [-3.4, -1.24, -0.9, 1.1, 2.5] {
        for k in 0..40 {
            let s = 4.0 + 0.4 * k as f64;
            let fit = fit_s(&sweep_curve(s, det, &thetas, None), &RabiFitOptions::default());
            if fit.status == RabiStatus::Ok {
                fitted += 1;
                assert!((fit.s / s - 1.0).abs() < 1e-8, "{det} {s}: {}", fit.s);
            }
        }
    }
    assert!(fitted >= 150, "only {fitted} of 200 curves fitted");
}

#[test]
fn uniform_field_maps_to_uniform_field() {
    let k = StarkConstants::default();
    let spec = GridSpec::new(6, 5, 23.0, 23.0, 0.0, 0.0).unwrap();
    let f = ScalarGrid::filled(spec, Unit::MilliVoltPerCm, 1.0);
    let det = ScalarGrid::filled(spec, Unit::MHz, 0.0);
    let thetas = theta_sweep(2.4e-3, 81).unwrap();
    let camp = synth_rabi(&f, 560e-6, &det, &thetas, &RabiSynthParams::default(), &k).unwrap();
    let map = map_microwave(&camp, &det, 560e-6, &RabiFitOptions::default(), &k).unwrap();
    assert_eq!(map.field.unmasked().count(), spec.len());
    for (_, v) in map.field.unmasked() {
        assert!((v - 1.0).abs() < 1e-9, "{v}");
    }
}

#[test]
fn noisy_campaign_is_reproducible_from_its_seed() {
    let k = StarkConstants::default();
    let spec = GridSpec::new(4, 4, 23.0, 23.0, 0.0, 0.0).unwrap();
    let f = ScalarGrid::filled(spec, Unit::MilliVoltPerCm, 0.8);
    let det = ScalarGrid::filled(spec, Unit::MHz, 0.1);
    let thetas = theta_sweep(2.4e-3, 41).unwrap();
    let params = RabiSynthParams {
        noise_sigma: 0.03,
        seed: 99,
        ..RabiSynthParams::default()
    };
    let a = synth_rabi(&f, 560e-6, &det, &thetas, &params, &k).unwrap();
    let b = synth_rabi(&f, 560e-6, &det, &thetas, &params, &k).unwrap();
    assert_eq!(a, b);
    let other = RabiSynthParams { seed: 100, ..params };
    let c = synth_rabi(&f, 560e-6, &det, &thetas, &other, &k).unwrap();
    assert_ne!(a.populations, c.populations);
}

#[test]
fn mode_field_symmetries_on_symmetric_device() {
    let geom = DeviceGeometry {
        shield_width: 1600.0,
        shield_height: 1000.0,
        ..DeviceGeometry::default()
    };
    // well above the chip, where the even mode no longer peaks at the edges
    let window = GridSpec::new(21, 9, 20.0, 20.0, -200.0, 300.0).unwrap();
    let settings = SolverSettings {
        omega: Relaxation::Optimal,
        ..SolverSettings::default()
    };
    let basis = compute_basis(&geom, &settings, &window).unwrap();
    let mirror = |i: usize| {
        let (ix, iy) = window.coords(i);
        window.index(window.nx - 1 - ix, iy)
    };

    // even mode: |E| mirror-symmetric and peaked on the axis
    let (v, mag) = mode_field(&basis, 1.0, 0.0);
    for i in 0..window.len() {
        assert!((mag.values[i] - mag.values[mirror(i)]).abs() < 1e-9);
        assert!((v.fx[i] + v.fx[mirror(i)]).abs() < 1e-9 * v.fx[i].abs().max(1.0));
    }
    let (x, _) = peak_position(&mag, &[]).unwrap();
    assert_eq!(x, 0.0);
    assert!((mag.range().unwrap().1 - 1.0).abs() < 1e-12);

    // odd mode: E_y odd, E_x even, |E| even
    let (v, mag) = mode_field(&basis, 0.0, 1.0);
    for i in 0..window.len() {
        let j = mirror(i);
        let scale = v.fx[i].hypot(v.fy[i]).max(1e-6);
        assert!((v.fy[i] + v.fy[j]).abs() < 1e-9 * scale.max(1.0));
        assert!((v.fx[i] - v.fx[j]).abs() < 1e-9 * scale.max(1.0));
        assert!((mag.values[i] - mag.values[j]).abs() < 1e-9);
    }
}

#[test]
fn mode_weights_are_recovered_from_their_own_field() {
    let geom = DeviceGeometry {
        shield_width: 800.0,
        shield_height: 400.0,
        ..DeviceGeometry::default()
    };
    let window = GridSpec::new(21, 9, 20.0, 20.0, -200.0, 40.0).unwrap();
    let basis = compute_basis(&geom, &SolverSettings::default(), &window).unwrap();
    let (a, b) = (0.8, 0.6);
    let (v, _) = mode_field(&basis, a, b);
    let target = v.magnitude().map(Unit::Dimensionless, |m| 2.5 * m);
    let (w, scale, rms) = fit_mode_weights(&basis, &target).unwrap();
    assert!((w.a - a).abs() < 1e-6 && (w.b - b).abs() < 1e-6, "{w:?}");
    assert!((scale - 2.5).abs() < 1e-6, "{scale}");
    assert!(rms < 1e-9, "{rms}");
}
