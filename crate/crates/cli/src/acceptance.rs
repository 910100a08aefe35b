//! Acceptance checks. Each returns a [`Check`] with the measured numbers;
//! `validate` runs them all against one configuration.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use stark_tomo::electrostatics::{
    compute_basis, field_from_potential, solve_potential, BasisFields, ChargeDensities, ChargeSpecies, DeviceGeometry,
    Electrode, PoissonProblem, PotentialSet, Relaxation, SolverSettings,
};
use stark_tomo::grid::{write_grid_to, Grid, GridSpec, ScalarGrid, VectorGrid};
use stark_tomo::microwave::{detuning_map, map_microwave, rabi_rate, MwFieldMap};
use stark_tomo::reconstruction::{
    magnitude_condition, pairwise_condition, reconstruct_3d, reconstruct_pixel_closed, reconstruct_pixel_search,
    Bounds, PixelFailure, SearchOptions,
};
use stark_tomo::spectroscopy::{intra_pixel_spread, total_magnitude};
use stark_tomo::stark::{fourier_fwhm, StarkConstants, EPSILON_0};

use crate::config::PipelineConfig;
use crate::error::Result;
use crate::pipeline::{self, Campaign};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(id: u32, name: &str, passed: bool, detail: String) -> Self {
        Check {
            id,
            name: name.to_string(),
            passed,
            detail,
        }
    }

    fn failed(id: u32, name: &str, err: impl std::fmt::Display) -> Self {
        Check::new(id, name, false, format!("error: {err}"))
    }

    /// `PASS`/`FAIL` line for terminal output.
    pub fn line(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!("criterion {:>2} {verdict} {}: {}", self.id, self.name, self.detail)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a / b - 1.0).abs()
}

/// The configuration with all synthetic noise switched off.
pub fn noiseless(cfg: &PipelineConfig) -> PipelineConfig {
    let mut c = cfg.clone();
    c.spectroscopy.noise_sigma = 0.0;
    c.microwave.noise_sigma = 0.0;
    c
}

/// The configuration with spectroscopic noise `sigma`, seeded.
pub fn noisy(cfg: &PipelineConfig, sigma: f64) -> PipelineConfig {
    let mut c = cfg.clone();
    c.spectroscopy.noise_sigma = sigma;
    c.spectroscopy.seed.get_or_insert(1);
    c
}

/// Campaign, fitted shift maps per label, and the fit outputs.
pub struct Closure {
    pub campaign: Campaign,
    pub shifts: BTreeMap<String, ScalarGrid>,
    pub widths: BTreeMap<String, ScalarGrid>,
}

pub fn closure(cfg: &PipelineConfig, basis: &BasisFields, consts: &StarkConstants) -> Result<Closure> {
    let campaign = pipeline::synthesize(cfg, basis, consts)?;
    let mut shifts = BTreeMap::new();
    let mut widths = BTreeMap::new();
    for (label, stack) in &campaign.stacks {
        let fit = pipeline::fit_spectra(cfg, stack)?;
        shifts.insert(label.clone(), fit.shift);
        widths.insert(label.clone(), fit.width);
    }
    Ok(Closure {
        campaign,
        shifts,
        widths,
    })
}

/// Stark-shift constants against the quoted field/shift pairs.
pub fn criterion_1(consts: &StarkConstants) -> Check {
    let shift = consts.stark_shift_magnitude(0.200);
    let field = consts.field_magnitude_from_shift(22.0).unwrap_or(f64::NAN);
    let passed = (shift - 21.56).abs() < 0.005
        && (field - 0.202).abs() < 0.0005
        && rel(shift, 22.0) < 0.05
        && rel(field, 0.200) < 0.05;
    Check::new(
        1,
        "Stark-shift constants",
        passed,
        format!(
            "shift(0.200 V/cm) = {shift:.4} MHz ({:.1}% from 22), field(22 MHz) = {field:.5} V/cm ({:.1}% from 0.200)",
            100.0 * rel(shift, 22.0),
            100.0 * rel(field, 0.200)
        ),
    )
}

/// Fourier limit and the fitted widths where the field is homogeneous.
pub fn criterion_2(cfg: &PipelineConfig, basis: &BasisFields, consts: &StarkConstants) -> Check {
    let name = "Fourier-limited width";
    let fwhm = fourier_fwhm(200.0);
    let cfg = noisy(cfg, 0.02);
    let run = match closure(&cfg, basis, consts) {
        Ok(r) => r,
        Err(e) => return Check::failed(2, name, e),
    };
    let fwhm0 = fourier_fwhm(cfg.spectroscopy.pulse_ns);
    let (mut n, mut worst) = (0usize, 0.0f64);
    for (label, field) in &run.campaign.fields {
        let mag = total_magnitude(field, cfg.spectroscopy.fz);
        let spread = intra_pixel_spread(&mag);
        let width = &run.widths[label];
        for (i, w) in width.unmasked() {
            // homogeneous: inhomogeneous broadening adds under 1 % to the width
            if mag.mask[i] || consts.broadened_fwhm(mag.values[i], spread[i], fwhm0) > 1.01 * fwhm0 {
                continue;
            }
            n += 1;
            worst = worst.max(rel(w, fwhm));
        }
    }
    let passed = rel(fwhm, 4.4) < 0.02 && n > 0 && worst < 0.10;
    Check::new(
        2,
        name,
        passed,
        format!(
            "fourier_fwhm(200 ns) = {fwhm:.4} MHz ({:.2}% from 4.4); worst fitted width off by {:.2}% over {n} homogeneous pixels at noise 0.02",
            100.0 * rel(fwhm, 4.4),
            100.0 * worst
        ),
    )
}

/// Largest and RMS shift error over every unmasked beam pixel.
fn shift_errors(run: &Closure, fz: f64, consts: &StarkConstants) -> (f64, f64, usize, usize) {
    let (mut worst, mut sum2, mut n, mut lost) = (0.0f64, 0.0, 0usize, 0usize);
    for (label, field) in &run.campaign.fields {
        let truth = total_magnitude(field, fz);
        let shift = &run.shifts[label];
        for i in 0..truth.spec.len() {
            if truth.mask[i] {
                continue;
            }
            if shift.mask[i] {
                lost += 1;
                continue;
            }
            let d = shift.values[i] - consts.stark_shift_magnitude(truth.values[i]);
            worst = worst.max(d.abs());
            sum2 += d * d;
            n += 1;
        }
    }
    (worst, (sum2 / n.max(1) as f64).sqrt(), n, lost)
}

/// Spectroscopic closure, noiseless and at noise 0.02.
pub fn criterion_3(cfg: &PipelineConfig, basis: &BasisFields, consts: &StarkConstants) -> Check {
    let name = "spectroscopic closure";
    let fz = cfg.spectroscopy.fz;
    let clean = match closure(&noiseless(cfg), basis, consts) {
        Ok(r) => shift_errors(&r, fz, consts),
        Err(e) => return Check::failed(3, name, e),
    };
    let rough = match closure(&noisy(cfg, 0.02), basis, consts) {
        Ok(r) => shift_errors(&r, fz, consts),
        Err(e) => return Check::failed(3, name, e),
    };
    let passed = clean.2 > 0 && clean.0 < 0.05 && rough.2 > 0 && rough.1 < 0.3;
    Check::new(
        3,
        name,
        passed,
        format!(
            "noiseless max |error| {:.2e} MHz over {} pixels ({} masked); noise 0.02 RMS {:.4} MHz over {} pixels ({} masked)",
            clean.0, clean.2, clean.3, rough.1, rough.2, rough.3
        ),
    )
}

/// Three applied fields and a stray vector with both condition numbers
/// below `max_cond`.
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

/// Random search against the closed form, and the 3D variant.
pub fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let opts = SearchOptions {
        bounds: Bounds::symmetric(0.5),
        ..SearchOptions::default()
    };
    let n = 10_000;
    let mut worst = 0.0f64;
    let mut closed_failures = 0;
    for k in 0..n {
        let (f, s) = random_instance(&mut rng, 10.0);
        let m: Vec<f64> = f.iter().map(|v| (v[0] + s[0]).hypot(v[1] + s[1])).collect();
        let Ok(closed) = reconstruct_pixel_closed(&f, &m) else {
            closed_failures += 1;
            continue;
        };
        let mut prng = ChaCha8Rng::seed_from_u64(k as u64);
        let out = reconstruct_pixel_search(&f, &m, &opts, &mut prng);
        worst = worst.max((out.stray[0] - closed[0]).hypot(out.stray[1] - closed[1]));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut recovered, mut worst_3d, mut rejected) = (0usize, 0.0f64, 0usize);
    while recovered < 1000 {
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
                recovered += 1;
                for c in 0..3 {
                    worst_3d = worst_3d.max((r[c] - s[c]).abs());
                }
            }
            Err(PixelFailure::IllConditioned { .. }) => rejected += 1,
            Err(_) => {
                worst_3d = f64::INFINITY;
                break;
            }
        }
    }
    let passed = closed_failures == 0 && worst < 1e-3 && worst_3d < 1e-9;
    Check::new(
        4,
        "reconstruction oracle",
        passed,
        format!(
            "{n} instances: worst search-vs-closed {worst:.2e} V/cm ({closed_failures} closed-form failures); 3D: worst component error {worst_3d:.2e} over {recovered} instances ({rejected} ill-conditioned skipped)"
        ),
    )
}

/// Reconstructed stray field against the charge-generated truth.
pub fn criterion_5(cfg: &PipelineConfig, basis: &BasisFields, consts: &StarkConstants) -> Check {
    let name = "stray-field closure";
    let cfg = noiseless(cfg);
    let result = closure(&cfg, basis, consts)
        .and_then(|run| Ok((pipeline::reconstruct(&cfg, basis, &run.shifts, consts)?, run)));
    let (rec, run) = match result {
        Ok(r) => r,
        Err(e) => return Check::failed(5, name, e),
    };
    let truth = &run.campaign.stray;
    let got = &rec.result.stray;
    let spec = truth.spec;
    let (mut sum2, mut n, mut beam, mut away) = (0.0, 0usize, 0usize, 0usize);
    for i in 0..spec.len() {
        if truth.mask[i] {
            continue;
        }
        beam += 1;
        if got.mask[i] {
            continue;
        }
        let d = (got.fx[i] - truth.fx[i]).hypot(got.fy[i] - truth.fy[i]);
        sum2 += d * d;
        n += 1;
        // the CPW sits at the origin
        let (ix, iy) = spec.coords(i);
        if got.fx[i] * -spec.x(ix) + got.fy[i] * -spec.y(iy) <= 0.0 {
            away += 1;
        }
    }
    let rms = (sum2 / n.max(1) as f64).sqrt();
    let coverage = n as f64 / beam.max(1) as f64;
    let passed = n > 0 && coverage >= 0.9 && rms < 5e-3 && away == 0;
    Check::new(
        5,
        name,
        passed,
        format!(
            "RMS error {:.3} mV/cm over {n} of {beam} beam pixels ({}); {away} vectors not pointing toward the CPW",
            rms * 1e3,
            rec.result.method
        ),
    )
}

/// Charge densities recovered from noiseless maps.
pub fn criterion_6(cfg: &PipelineConfig, basis: &BasisFields, consts: &StarkConstants) -> Check {
    let name = "charge-density fit";
    let cfg = noiseless(cfg);
    let fit = closure(&cfg, basis, consts).and_then(|run| pipeline::fit_charges(&cfg, basis, &run.shifts, consts));
    let fit = match fit {
        Ok(f) => f,
        Err(e) => return Check::failed(6, name, e),
    };
    let truth = cfg.charges();
    let eg = rel(fit.charges.sigma_g, truth.sigma_g);
    let es = rel(fit.charges.sigma_s, truth.sigma_s);
    Check::new(
        6,
        name,
        fit.converged && eg < 0.01 && es < 0.01,
        format!(
            "sigma_g {:.4e} ({:.3}% off), sigma_s {:.4e} ({:.3}% off) over {} pixels",
            fit.charges.sigma_g,
            100.0 * eg,
            fit.charges.sigma_s,
            100.0 * es,
            fit.pixels
        ),
    )
}

/// Held-out configuration predicted from the reconstruction.
pub fn criterion_7(cfg: &PipelineConfig, basis: &BasisFields, consts: &StarkConstants) -> Check {
    let name = "validation by superposition";
    let holdout = |cfg: &PipelineConfig| -> Result<Option<(f64, f64)>> {
        let run = closure(cfg, basis, consts)?;
        let rec = pipeline::reconstruct(cfg, basis, &run.shifts, consts)?;
        Ok(rec.holdout.map(|(_, d)| (d.max_abs, d.rms)))
    };
    let (clean, rough) = match (holdout(&noiseless(cfg)), holdout(&noisy(cfg, 0.02))) {
        (Ok(Some(a)), Ok(Some(b))) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Check::failed(7, name, e),
        _ => return Check::failed(7, name, "no held-out potential set configured"),
    };
    Check::new(
        7,
        name,
        clean.0 < 5e-3 && rough.0 < 50e-3,
        format!(
            "noiseless max deviation {:.3} mV/cm (RMS {:.3}); noise 0.02 max {:.2} mV/cm (RMS {:.2})",
            clean.0 * 1e3,
            clean.1 * 1e3,
            rough.0 * 1e3,
            rough.1 * 1e3
        ),
    )
}

/// Compensation from the reconstructed field, scored on the true one.
pub fn criterion_8(cfg: &PipelineConfig, basis: &BasisFields, consts: &StarkConstants) -> Check {
    let name = "compensation";
    let cfg = noiseless(cfg);
    let result = closure(&cfg, basis, consts).and_then(|run| {
        let rec = pipeline::reconstruct(&cfg, basis, &run.shifts, consts)?;
        let comp = pipeline::compensate_stray(&cfg, basis, &rec.result.stray)?;
        Ok((run, comp))
    });
    let (run, comp) = match result {
        Ok(r) => r,
        Err(e) => return Check::failed(8, name, e),
    };
    let truth = &run.campaign.stray;
    let mut residual = basis.applied(&comp.pots);
    if let Err(e) = residual.add_scaled(truth, 1.0) {
        return Check::failed(8, name, e);
    }
    let region = cfg.compensation_region(&basis.spec);
    let (mut res_max, mut stray_max, mut n) = (0.0f64, 0.0f64, 0usize);
    for i in (0..region.len()).filter(|&i| region[i] && !truth.mask[i]) {
        res_max = res_max.max(residual.fx[i].hypot(residual.fy[i]));
        stray_max = stray_max.max(truth.fx[i].hypot(truth.fy[i]));
        n += 1;
    }
    let reduction = stray_max / res_max;
    Check::new(
        8,
        name,
        n > 0 && res_max <= 30e-3 && reduction > 50.0,
        format!(
            "true residual max {:.2} mV/cm over {n} region pixels, stray max {:.3} V/cm, reduction {reduction:.1} ({})",
            res_max * 1e3,
            stray_max,
            comp.pots
        ),
    )
}

/// Rabi rate against the quoted full-transfer time, and map closure.
/// Worst relative error of the mapped pixels against `truth`, and their count.
fn map_error(map: &MwFieldMap, truth: &ScalarGrid) -> (f64, usize) {
    map.field.unmasked().fold((0.0f64, 0usize), |(w, n), (i, v)| {
        (w.max(rel(v, truth.values[i])), n + 1)
    })
}

pub fn criterion_9(cfg: &PipelineConfig, basis: &BasisFields, consts: &StarkConstants) -> Check {
    let name = "microwave";
    let t_pi = std::f64::consts::PI / rabi_rate(1.0, consts);
    let cfg = noiseless(cfg);
    let m = &cfg.microwave;
    let result = closure(&cfg, basis, consts).and_then(|run| {
        let c = &run.campaign;
        // detuning the campaign was synthesised with
        let shift = pipeline::predicted_shift(basis, &c.rabi_pots, &c.stray, cfg.spectroscopy.fz, consts)?;
        let known = map_microwave(
            &c.rabi,
            &detuning_map(&shift, m.drive_offset),
            m.theta_max,
            &cfg.rabi_fit_options(),
            consts,
        )?;
        let rec = pipeline::reconstruct(&cfg, basis, &run.shifts, consts)?;
        let (_, chained) = pipeline::microwave_map(
            &cfg,
            basis,
            &c.rabi,
            &c.rabi_pots,
            &rec.result.stray,
            rec.result.fz,
            consts,
        )?;
        Ok((run, known, chained))
    });
    let (run, known, chained) = match result {
        Ok(r) => r,
        Err(e) => return Check::failed(9, name, e),
    };
    let truth = &run.campaign.mw_field;
    let (worst, n) = map_error(&known, truth);
    let (worst_chained, n_chained) = map_error(&chained, truth);
    let passed = (t_pi - 426.0).abs() < 1.0
        && rel(t_pi, 400.0) < 0.10
        && n > 0
        && worst < 0.02
        && n_chained > 0
        && worst_chained < 0.02;
    Check::new(
        9,
        name,
        passed,
        format!(
            "pi-pulse at 1 mV/cm {t_pi:.1} ns ({:.1}% from 400); map worst relative error {worst:.2e} over {n} of {} beam pixels with the synthesis detuning, {worst_chained:.2e} over {n_chained} with the detuning from the reconstructed stray field",
            100.0 * rel(t_pi, 400.0),
            truth.count_unmasked()
        ),
    )
}

fn field_at(g: &VectorGrid, x: f64, y: f64) -> (f64, f64) {
    let (ix, iy) = g.spec.locate(x, y).expect("probe inside grid");
    let i = g.spec.index(ix, iy);
    (g.fx[i], g.fy[i])
}

/// Uniform field between a lifted shield and a flat grounded chip.
fn parallel_plate_error() -> Result<f64> {
    let geom = DeviceGeometry {
        center_width: 0.0,
        gap_width: 0.0,
        shield_width: 20_000.0,
        shield_height: 1000.0,
        ..DeviceGeometry::default()
    };
    let settings = SolverSettings {
        dx: 50.0,
        dy: 50.0,
        omega: Relaxation::Optimal,
        ..SolverSettings::default()
    };
    let pots = PotentialSet::new("plate", 0.0, 0.0, 0.0, 1.0);
    let sol = solve_potential(&geom, &pots, &ChargeDensities::default(), &settings)?;
    let field = field_from_potential(&sol.potential);
    let mut worst = 0.0f64;
    // 1 V over 1000 µm = 10 V/cm, pointing down
    for (x, y) in [(0.0, 500.0), (-2000.0, 250.0), (3000.0, 800.0)] {
        let (fx, fy) = field_at(&field, x, y);
        worst = worst.max((fx / 10.0).hypot(fy / -10.0 - 1.0));
    }
    Ok(worst)
}

/// Field (V/cm) at `(x, y)` µm of line charges `λ` (C/m) at `sources`
/// inside the grounded box `[-a, a] × [0, h]`, by image summation.
fn boxed_line_charges(sources: &[(f64, f64, f64)], a: f64, h: f64, x: f64, y: f64, terms: i32) -> (f64, f64) {
    let (mut ex, mut ey) = (0.0, 0.0);
    for &(xs, ys, lambda) in sources {
        for m in -terms..=terms {
            // mirror images across x = ±a: period 4a, alternating sign
            let xs_m = [
                (4.0 * a * m as f64 + xs, 1.0),
                (4.0 * a * m as f64 + 2.0 * a - xs, -1.0),
            ];
            for n in -terms..=terms {
                let ys_n = [(2.0 * h * n as f64 + ys, 1.0), (2.0 * h * n as f64 - ys, -1.0)];
                for &(xi, sx) in &xs_m {
                    for &(yi, sy) in &ys_n {
                        let (dx, dy) = ((x - xi) * 1e-6, (y - yi) * 1e-6);
                        let r2 = dx * dx + dy * dy;
                        let k = sx * sy * lambda / (2.0 * std::f64::consts::PI * EPSILON_0 * r2);
                        ex += k * dx;
                        ey += k * dy;
                    }
                }
            }
        }
    }
    // V/m -> V/cm
    (ex * 1e-2, ey * 1e-2)
}

/// Charged strip in a grounded box against its image series.
fn charged_strip_error() -> Result<f64> {
    let (a, h, pitch) = (1000.0, 1200.0, 10.0);
    let spec = GridSpec::new(201, 121, pitch, pitch, -a, 0.0)?;
    let mut p = PoissonProblem::new(spec);
    for iy in 0..spec.ny {
        for ix in 0..spec.nx {
            if iy == 0 || iy == spec.ny - 1 || ix == 0 || ix == spec.nx - 1 {
                p.fixed[spec.index(ix, iy)] = Some(0.0);
            }
        }
    }
    let sigma = -2e-6;
    let strip_row = 20;
    let mut sources = Vec::new();
    for ix in 0..spec.nx {
        let x = spec.x(ix);
        if x.abs() <= 20.0 + 1e-9 {
            p.sheet[spec.index(ix, strip_row)] = sigma;
            sources.push((x, spec.y(strip_row), sigma * pitch * 1e-6));
        }
    }
    let omega = Relaxation::Optimal.factor(&spec);
    let sol = p.solve(omega, 1e-12, 200_000)?;
    let field = field_from_potential(&sol.potential);
    let mut worst = 0.0f64;
    for (x, y) in [
        (300.0, 200.0),
        (-300.0, 200.0),
        (0.0, 500.0),
        (200.0, 600.0),
        (-400.0, 400.0),
    ] {
        let (fx, fy) = field_at(&field, x, y);
        let (ox, oy) = boxed_line_charges(&sources, a, h, x, y, 40);
        worst = worst.max((fx - ox).hypot(fy - oy) / ox.hypot(oy));
    }
    Ok(worst)
}

/// Largest relative change of any unit response when the pitch is halved,
/// at probes at least 200 µm from the chip and the walls.
fn refinement_change(settings: &SolverSettings) -> Result<f64> {
    let geom = DeviceGeometry {
        shield_width: 2000.0,
        shield_height: 1200.0,
        ..DeviceGeometry::default()
    };
    let window = GridSpec::new(9, 5, 200.0, 200.0, -800.0, 200.0)?;
    let basis = |pitch: f64| {
        let s = SolverSettings {
            dx: pitch,
            dy: pitch,
            tol: 1e-10,
            ..*settings
        };
        compute_basis(&geom, &s, &window)
    };
    let coarse = basis(settings.dx)?;
    let fine = basis(settings.dx / 2.0)?;
    let pairs = Electrode::ALL
        .iter()
        .map(|e| (coarse.electrode(*e), fine.electrode(*e)))
        .chain(ChargeSpecies::ALL.iter().map(|c| (coarse.charge(*c), fine.charge(*c))));
    let mut worst = 0.0f64;
    for (c, f) in pairs {
        for i in 0..window.len() {
            let (ix, iy) = window.coords(i);
            let (x, y) = (window.x(ix), window.y(iy));
            if x.abs() > 800.0 - 1e-9 || !(200.0..=1000.0).contains(&y) {
                continue;
            }
            worst = worst.max(rel(c.fx[i].hypot(c.fy[i]), f.fx[i].hypot(f.fy[i])));
        }
    }
    Ok(worst)
}

/// Solver against analytic fields, and its grid convergence.
pub fn criterion_10(cfg: &PipelineConfig) -> Check {
    let name = "solver verification";
    let result = (|| -> Result<(f64, f64, f64)> {
        Ok((
            parallel_plate_error()?,
            charged_strip_error()?,
            refinement_change(&cfg.solver_settings()?)?,
        ))
    })();
    match result {
        Ok((plate, strip, refine)) => Check::new(
            10,
            name,
            plate < 1e-3 && strip < 0.02 && refine < 0.01,
            format!(
                "parallel plate {plate:.2e} relative; charged strip vs images {:.2}%; pitch halving changes unit responses by {:.3}%",
                100.0 * strip,
                100.0 * refine
            ),
        ),
        Err(e) => Check::failed(10, name, e),
    }
}

/// Every output of a seeded noisy run, serialised.
pub fn run_bytes(cfg: &PipelineConfig, basis: &BasisFields, consts: &StarkConstants) -> Result<Vec<u8>> {
    let run = closure(cfg, basis, consts)?;
    let rec = pipeline::reconstruct(cfg, basis, &run.shifts, consts)?;
    let mut out = Vec::new();
    let io = |e: std::io::Error| crate::error::CliError::Io(e.to_string());
    for stack in run.campaign.stacks.values() {
        stack.write_to(&mut out, &[]).map_err(io)?;
    }
    for g in run.shifts.values().chain(run.widths.values()) {
        write_grid_to(&Grid::Scalar(g.clone()), &mut out, &[]).map_err(io)?;
    }
    write_grid_to(&Grid::Vector(rec.result.stray.clone()), &mut out, &[]).map_err(io)?;
    run.campaign.rabi.write_to(&mut out, &[]).map_err(io)?;
    Ok(out)
}

/// Seeded noisy runs on pools of different sizes give identical bytes.
pub fn criterion_11(cfg: &PipelineConfig, basis: &BasisFields, consts: &StarkConstants) -> Check {
    let name = "determinism";
    let mut cfg = noisy(cfg, 0.02);
    cfg.microwave.noise_sigma = 0.03;
    cfg.microwave.seed.get_or_insert(1);
    cfg.reconstruction.method = "random-search".into();
    cfg.reconstruction.seed.get_or_insert(1);
    let mut runs = Vec::new();
    for threads in [1, 3] {
        let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(p) => p,
            Err(e) => return Check::failed(11, name, e),
        };
        match pool.install(|| run_bytes(&cfg, basis, consts)) {
            Ok(b) => runs.push(b),
            Err(e) => return Check::failed(11, name, e),
        }
    }
    let same = runs[0] == runs[1];
    Check::new(
        11,
        name,
        same,
        format!(
            "{} bytes of seeded output, identical on 1 and 3 threads: {same}",
            runs[0].len()
        ),
    )
}

/// All criteria in order.
pub fn run_all(cfg: &PipelineConfig, basis: &BasisFields, consts: &StarkConstants) -> Vec<Check> {
    vec![
        criterion_1(consts),
        criterion_2(cfg, basis, consts),
        criterion_3(cfg, basis, consts),
        criterion_4(),
        criterion_5(cfg, basis, consts),
        criterion_6(cfg, basis, consts),
        criterion_7(cfg, basis, consts),
        criterion_8(cfg, basis, consts),
        criterion_9(cfg, basis, consts),
        criterion_10(cfg),
        criterion_11(cfg, basis, consts),
    ]
}
