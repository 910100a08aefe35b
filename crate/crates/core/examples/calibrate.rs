//! Fit the gap-flux fraction and layer thickness so that the reference
//! potential set and the measured charge densities leave the smallest
//! in-plane field over the beam.
//!
//! Both charge responses are linear in these two constants, so one basis
//! solve at unit values followed by a 2×2 least-squares fit is enough.
//!
//! Run with `cargo run --release -p stark-tomo --example calibrate`.

use std::time::Instant;

use stark_tomo::electrostatics::*;
use stark_tomo::grid::{polygon_mask, GridSpec};

fn main() {
    let t0 = Instant::now();
    let geom = DeviceGeometry {
        gap_flux_fraction: 1.0,
        layer_thickness: 1.0,
        ..DeviceGeometry::default()
    };
    let settings = SolverSettings {
        omega: Relaxation::Optimal,
        ..SolverSettings::default()
    };
    let window = GridSpec::new(111, 111, 23.0, 23.0, -1265.0, 735.0).unwrap();
    let basis = compute_basis(&geom, &settings, &window).unwrap();
    println!("basis solved in {:.1?}", t0.elapsed());

    let beam_outline: Vec<(f64, f64)> = (0..64)
        .map(|k| {
            let a = k as f64 / 64.0 * std::f64::consts::TAU;
            (1250.0 * a.cos(), 2000.0 + 1250.0 * a.sin())
        })
        .collect();
    let outside = polygon_mask(&window, &beam_outline);
    let pots = PotentialSet::new("a", 4.00, -0.02, 0.00, -0.11);
    let (sigma_g, sigma_s) = (-23.6e-6, -2.10e-6);

    let applied = basis.applied(&pots);
    let gap = basis.charge(ChargeSpecies::Gap);
    let surface = basis.charge(ChargeSpecies::Surface);
    // normal equations for min Σ |E_a + kg·σ_g·G + t·σ_s·S|²
    let (mut ata, mut atb) = ([[0.0; 2]; 2], [0.0; 2]);
    for i in (0..window.len()).filter(|&i| !outside[i]) {
        for (ea, g, s) in [
            (applied.fx[i], gap.fx[i], surface.fx[i]),
            (applied.fy[i], gap.fy[i], surface.fy[i]),
        ] {
            let col = [sigma_g * g, sigma_s * s];
            for r in 0..2 {
                for c in 0..2 {
                    ata[r][c] += col[r] * col[c];
                }
                atb[r] -= col[r] * ea;
            }
        }
    }
    let det = ata[0][0] * ata[1][1] - ata[0][1] * ata[1][0];
    let kg = (atb[0] * ata[1][1] - atb[1] * ata[0][1]) / det;
    let t = (ata[0][0] * atb[1] - ata[1][0] * atb[0]) / det;
    println!("gap_flux_fraction = {kg:.4}");
    println!("layer_thickness   = {t:.4}");

    let q = ChargeDensities {
        sigma_g: sigma_g * kg,
        sigma_s: sigma_s * t,
    };
    let total = basis.superpose(&pots, &q).magnitude();
    let stray = basis.stray(&q).magnitude();
    let over_beam = |g: &stark_tomo::grid::ScalarGrid| {
        (0..window.len())
            .filter(|&i| !outside[i])
            .map(|i| g.values[i])
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (lo, hi) = over_beam(&total);
    let (_, stray_hi) = over_beam(&stray);
    println!("total field over beam: {lo:.4}..{hi:.4} V/cm, stray max {stray_hi:.3} V/cm");
}
