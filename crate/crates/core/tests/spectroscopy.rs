use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use stark_tomo::spectroscopy::*;
use stark_tomo::stark::fourier_fwhm;

#[test]
fn monte_carlo_centers_are_unbiased_and_covered_by_their_errors() {
    let det = detuning_range(-7.0, 22.0, 30).unwrap();
    let fwhm = fourier_fwhm(200.0);
    let opts = FitOptions::for_pulse(200.0);
    let noise = Normal::new(0.0, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let trials = 1000;
    let (mut covered, mut bias) = (0, 0.0);
    for k in 0..trials {
        let center = rng.random_range(0.0..15.0);
        let y: Vec<f64> = det
            .iter()
            .map(|&d| gaussian_dip(d, 1.0, 0.8, center, fwhm) + noise.sample(&mut rng))
            .collect();
        let fit = fit_pixel(&y, &det, None, &opts);
        assert_eq!(fit.status, FitStatus::Ok, "trial {k}");
        let err = fit.center - center;
        bias += err;
        if err.abs() <= 3.0 * fit.std_errors[2] {
            covered += 1;
        }
    }
    let rate = covered as f64 / trials as f64;
    let bias = bias / trials as f64;
    assert!(rate >= 0.99, "coverage {rate}");
    assert!(bias.abs() < 0.1, "bias {bias} MHz");
}

#[test]
fn noiseless_dips_fit_exactly_across_the_window() {
    let det = detuning_range(-7.0, 22.0, 30).unwrap();
    let fwhm = fourier_fwhm(200.0);
    let opts = FitOptions::for_pulse(200.0);
    for k in 0..=30 {
        let center = -5.0 + k as f64 * 0.83;
        let y: Vec<f64> = det.iter().map(|&d| gaussian_dip(d, 1.0, 0.8, center, fwhm)).collect();
        let fit = fit_pixel(&y, &det, None, &opts);
        assert_eq!(fit.status, FitStatus::Ok, "{center}");
        assert!((fit.center - center).abs() < 1e-8, "{center}: {}", fit.center);
        assert!((fit.fwhm - fwhm).abs() < 1e-8);
    }
}

#[test]
fn flat_spectrum_is_not_fitted_as_a_line() {
    let det = detuning_range(-7.0, 22.0, 30).unwrap();
    let noise = Normal::new(0.0, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let opts = FitOptions::for_pulse(200.0);
    let mut accepted = 0;
    for _ in 0..200 {
        let y: Vec<f64> = det.iter().map(|_| 1.0 + noise.sample(&mut rng)).collect();
        if fit_pixel(&y, &det, None, &opts).usable() {
            accepted += 1;
        }
    }
    assert!(accepted <= 4, "{accepted} of 200 noise-only spectra accepted");
}
