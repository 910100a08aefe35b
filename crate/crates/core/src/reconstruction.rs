//! Stray-field reconstruction from several field-magnitude maps, surface
//! charge fits, validation by superposition and compensation potentials.
//!
//! Per pixel, measurement `i` gives `m_i = |F_i + S|` for a known applied
//! field `F_i` and unknown stray field `S`. Subtracting the squared
//! equations pairwise removes `|S|²` and leaves a linear system in `S`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::electrostatics::{BasisFields, ChargeDensities, ChargeSpecies, Electrode, PotentialSet};
use crate::grid::{GridError, ScalarGrid, Unit, VectorGrid};
use crate::lm::{self, LmOptions, Model};
use crate::seed;
use crate::stark::StarkConstants;

/// Largest accepted condition number of the pairwise-difference system.
pub const MAX_CONDITION: f64 = 1e6;

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("need at least {needed} measurements, got {got}")]
    TooFewMeasurements { needed: usize, got: usize },
    #[error("measurement labels must be unique, `{0}` repeats")]
    DuplicateLabel(String),
    #[error("no pixels in the requested region")]
    EmptyRegion,
    #[error("invalid bounds: {0}")]
    Bounds(String),
    #[error("charge fit failed: {0}")]
    ChargeFit(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, ReconError>;

/// Why a single pixel could not be solved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PixelFailure {
    TooFew { needed: usize, got: usize },
    IllConditioned { cond: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ClosedForm,
    RandomSearch,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::ClosedForm => "closed-form",
            Method::RandomSearch => "random-search",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "closed-form" => Ok(Method::ClosedForm),
            "random-search" => Ok(Method::RandomSearch),
            other => Err(format!("unknown reconstruction method `{other}`")),
        }
    }
}

/// One field-magnitude map and the applied field it was taken under.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub label: String,
    pub pots: PotentialSet,
    /// Electrode contribution only, V/cm.
    pub applied: VectorGrid,
    /// In-plane `|F_tot|`, V/cm.
    pub magnitude: ScalarGrid,
}

impl Measurement {
    pub fn new(pots: PotentialSet, applied: VectorGrid, magnitude: ScalarGrid) -> Result<Self> {
        applied.spec.ensure_same(&magnitude.spec)?;
        Ok(Measurement {
            label: pots.label.clone(),
            pots,
            applied,
            magnitude,
        })
    }

    /// Build from a basis: the applied field is the electrode superposition.
    pub fn from_basis(pots: PotentialSet, basis: &BasisFields, magnitude: ScalarGrid) -> Result<Self> {
        let applied = basis.applied(&pots);
        Measurement::new(pots, applied, magnitude)
    }
}

/// Solve the pairwise-subtracted system `2(F_i − F_0)·S = (m_i² − m_0²) −
/// (|F_i|² − |F_0|²)` in any dimension, in the least-squares sense when
/// overdetermined.
fn solve_pairwise<const D: usize>(applied: &[[f64; D]], m: &[f64]) -> std::result::Result<[f64; D], PixelFailure> {
    let n = applied.len().min(m.len());
    if n < D + 1 {
        return Err(PixelFailure::TooFew { needed: D + 1, got: n });
    }
    let norm2 = |v: &[f64; D]| v.iter().map(|c| c * c).sum::<f64>();
    let a = DMatrix::from_fn(n - 1, D, |r, c| 2.0 * (applied[r + 1][c] - applied[0][c]));
    let b = DVector::from_fn(n - 1, |r, _| {
        (m[r + 1] * m[r + 1] - m[0] * m[0]) - (norm2(&applied[r + 1]) - norm2(&applied[0]))
    });
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond < MAX_CONDITION) {
        return Err(PixelFailure::IllConditioned { cond });
    }
    let x = svd.solve(&b, 0.0).map_err(|_| PixelFailure::IllConditioned { cond })?;
    let mut out = [0.0; D];
    out.iter_mut().zip(x.iter()).for_each(|(o, v)| *o = *v);
    Ok(out)
}

/// Closed-form in-plane stray field from three or more measurements.
pub fn reconstruct_pixel_closed(applied: &[[f64; 2]], m: &[f64]) -> std::result::Result<[f64; 2], PixelFailure> {
    solve_pairwise::<2>(applied, m)
}

/// Closed-form 3D stray field from four or more measurements with
/// three-component applied fields.
pub fn reconstruct_3d(applied: &[[f64; 3]], m: &[f64]) -> std::result::Result<[f64; 3], PixelFailure> {
    solve_pairwise::<3>(applied, m)
}

/// Condition number of the 2D pairwise-difference system.
pub fn pairwise_condition(applied: &[[f64; 2]]) -> f64 {
    if applied.len() < 3 {
        return f64::INFINITY;
    }
    let a = DMatrix::from_fn(applied.len() - 1, 2, |r, c| applied[r + 1][c] - applied[0][c]);
    let sv = a.singular_values();
    if sv.min() > 0.0 {
        sv.max() / sv.min()
    } else {
        f64::INFINITY
    }
}

/// Condition number of the magnitude Jacobian at `s`, whose rows are the
/// unit vectors along `F_i + S`. Large values mean a flat valley in the
/// least-squares cost.
pub fn magnitude_condition(applied: &[[f64; 2]], s: [f64; 2]) -> f64 {
    let j = DMatrix::from_fn(applied.len(), 2, |r, c| {
        let v = [applied[r][0] + s[0], applied[r][1] + s[1]];
        v[c] / v[0].hypot(v[1]).max(1e-300)
    });
    let sv = j.singular_values();
    if sv.min() > 0.0 {
        sv.max() / sv.min()
    } else {
        f64::INFINITY
    }
}

/// Sum over measurements of `(|F_i + S| − m_i)²`.
pub fn pixel_cost(applied: &[[f64; 2]], m: &[f64], s: [f64; 2]) -> f64 {
    applied
        .iter()
        .zip(m)
        .map(|(f, mi)| {
            let d = (f[0] + s[0]).hypot(f[1] + s[1]) - mi;
            d * d
        })
        .sum()
}

/// RMS over measurements of `|F_i + S| − m_i`.
pub fn pixel_residual(applied: &[[f64; 2]], m: &[f64], s: [f64; 2]) -> f64 {
    (pixel_cost(applied, m, s) / applied.len().max(1) as f64).sqrt()
}

/// Box for the random search, V/cm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Bounds {
    pub fn symmetric(half: f64) -> Self {
        Bounds {
            x: (-half, half),
            y: (-half, half),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x.0 < self.x.1 && self.y.0 < self.y.1) {
            return Err(ReconError::Bounds(format!("empty box {self:?}")));
        }
        Ok(())
    }

    fn clamp(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0].clamp(self.x.0, self.x.1), p[1].clamp(self.y.0, self.y.1)]
    }

    /// Whether `p` lies within `rel` of the box size from an edge.
    pub fn near_edge(&self, p: [f64; 2], rel: f64) -> bool {
        let tx = rel * (self.x.1 - self.x.0);
        let ty = rel * (self.y.1 - self.y.0);
        p[0] - self.x.0 < tx || self.x.1 - p[0] < tx || p[1] - self.y.0 < ty || self.y.1 - p[1] < ty
    }
}

/// Random-search schedule: about `initial` samples jittered over a square
/// lattice in the box, then up to `starts` of the lattice's local minima are
/// each refined by sampling a shrinking square around the running best. The square's half-width halves
/// after every `shrink_every` improvements, and also after `fail_limit`
/// consecutive failures. The starts compete by successive halving: each
/// round gives every surviving start an equal share and drops the worse
/// half, and the last survivor receives the remainder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub bounds: Bounds,
    /// Total objective evaluations.
    pub budget: usize,
    pub initial: usize,
    pub starts: usize,
    pub shrink_every: usize,
    pub fail_limit: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            bounds: Bounds::symmetric(10.0),
            budget: 2000,
            initial: 900,
            starts: 12,
            shrink_every: 6,
            fail_limit: 24,
        }
    }
}

/// Shrink-to-best refinement state around one start.
struct Refine {
    best: [f64; 2],
    cost: f64,
    radius: f64,
    wins: usize,
    fails: usize,
}

impl Refine {
    /// Spend `n` evaluations. An accepted step is repeated, doubling each
    /// time, for as long as it keeps improving.
    fn run<R: Rng>(&mut self, n: usize, applied: &[[f64; 2]], m: &[f64], opts: &SearchOptions, rng: &mut R) {
        let mut left = n;
        while left > 0 {
            let step = [
                self.radius * (2.0 * rng.random::<f64>() - 1.0),
                self.radius * (2.0 * rng.random::<f64>() - 1.0),
            ];
            let p = opts.bounds.clamp([self.best[0] + step[0], self.best[1] + step[1]]);
            let c = pixel_cost(applied, m, p);
            left -= 1;
            if c < self.cost {
                self.best = p;
                self.cost = c;
                self.wins += 1;
                self.fails = 0;
                let mut stride = [2.0 * step[0], 2.0 * step[1]];
                while left > 0 {
                    let q = opts.bounds.clamp([self.best[0] + stride[0], self.best[1] + stride[1]]);
                    let cq = pixel_cost(applied, m, q);
                    left -= 1;
                    if cq >= self.cost {
                        break;
                    }
                    self.best = q;
                    self.cost = cq;
                    stride = [2.0 * stride[0], 2.0 * stride[1]];
                }
                if self.wins.is_multiple_of(opts.shrink_every.max(1)) {
                    self.radius *= 0.5;
                }
            } else {
                self.fails += 1;
                if self.fails >= opts.fail_limit.max(1) {
                    self.radius *= 0.5;
                    self.fails = 0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOutcome {
    pub stray: [f64; 2],
    /// RMS residual, V/cm.
    pub residual: f64,
    /// The optimum sits on the edge of the search box.
    pub at_boundary: bool,
}

/// Seeded random search for the least-squares stray field at one pixel.
pub fn reconstruct_pixel_search<R: Rng>(
    applied: &[[f64; 2]],
    m: &[f64],
    opts: &SearchOptions,
    rng: &mut R,
) -> SearchOutcome {
    let b = opts.bounds;
    let (wx, wy) = (b.x.1 - b.x.0, b.y.1 - b.y.0);
    // one jittered sample per cell of a g × g lattice over the box
    let g = ((opts.initial.clamp(1, opts.budget.max(1)) as f64).sqrt() as usize).max(1);
    let n_init = g * g;
    let (cx, cy) = (wx / g as f64, wy / g as f64);
    let mut samples: Vec<([f64; 2], f64)> = Vec::with_capacity(n_init);
    for j in 0..g {
        for i in 0..g {
            let p = [
                b.x.0 + cx * (i as f64 + rng.random::<f64>()),
                b.y.0 + cy * (j as f64 + rng.random::<f64>()),
            ];
            samples.push((p, pixel_cost(applied, m, p)));
        }
    }
    // starts are the lattice cells cheaper than all their neighbours,
    // cheapest first; the overall cheapest cells fill any remaining slots
    let is_local_min = |k: usize| {
        let (i, j) = ((k % g) as isize, (k / g) as isize);
        (-1..=1).all(|dj: isize| {
            (-1..=1).all(|di: isize| {
                let (ni, nj) = (i + di, j + dj);
                (di == 0 && dj == 0)
                    || ni < 0
                    || nj < 0
                    || ni >= g as isize
                    || nj >= g as isize
                    || samples[k].1 <= samples[nj as usize * g + ni as usize].1
            })
        })
    };
    let mut order: Vec<usize> = (0..n_init).collect();
    order.sort_by(|&a, &c| samples[a].1.total_cmp(&samples[c].1));
    let mut picked: Vec<usize> = order.iter().copied().filter(|&k| is_local_min(k)).collect();
    picked.truncate(opts.starts.max(1));
    for &k in &order {
        if picked.len() >= opts.starts.max(1) {
            break;
        }
        if !picked.contains(&k) {
            picked.push(k);
        }
    }
    let spacing = cx.max(cy);
    let mut runs: Vec<Refine> = picked
        .iter()
        .map(|&k| Refine {
            best: samples[k].0,
            cost: samples[k].1,
            radius: spacing,
            wins: 0,
            fails: 0,
        })
        .collect();
    // successive halving: equal budget per round, worse half dropped
    let rest = opts.budget.saturating_sub(n_init);
    let rounds = (usize::BITS - runs.len().leading_zeros()) as usize;
    let per_round = rest / rounds;
    let mut spent = 0;
    while runs.len() > 1 {
        let each = per_round / runs.len();
        for run in &mut runs {
            run.run(each, applied, m, opts, rng);
        }
        spent += each * runs.len();
        runs.sort_by(|a, c| a.cost.total_cmp(&c.cost));
        runs.truncate(runs.len().div_ceil(2).min(runs.len() - 1).max(1));
    }
    let mut winner = runs.pop().expect("at least one start");
    winner.run(rest - spent, applied, m, opts, rng);
    let overall = (winner.best, winner.cost);
    SearchOutcome {
        stray: overall.0,
        residual: (overall.1 / applied.len().max(1) as f64).sqrt(),
        at_boundary: b.near_edge(overall.0, 1e-6),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconOptions {
    pub method: Method,
    pub search: SearchOptions,
    pub seed: u64,
}

impl Default for ReconOptions {
    fn default() -> Self {
        ReconOptions {
            method: Method::ClosedForm,
            search: SearchOptions::default(),
            seed: 0,
        }
    }
}

/// Reconstructed in-plane stray field with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StrayFieldResult {
    pub stray: VectorGrid,
    /// Uniform out-of-plane component used to obtain in-plane magnitudes.
    pub fz: f64,
    /// RMS over measurements of `||F_i + S| − m_i|`, V/cm.
    pub residual: ScalarGrid,
    /// Condition number of the pairwise-difference system.
    pub condition: ScalarGrid,
    pub method: Method,
    pub seed: u64,
    pub ill_conditioned: usize,
    pub boundary_hits: usize,
}

/// Single `fz` for the whole map from the per-map minimum shifts, averaged
/// over the maps.
pub fn estimate_fz(shift_maps: &[&ScalarGrid], consts: &StarkConstants) -> Option<f64> {
    let minima: Vec<f64> = shift_maps.iter().filter_map(|g| g.range().map(|r| r.0)).collect();
    if minima.is_empty() {
        return None;
    }
    let mean = minima.iter().sum::<f64>() / minima.len() as f64;
    Some((2.0 * mean.max(0.0) / consts.delta_alpha).sqrt())
}

/// Per-pixel reconstruction over a shared grid. Pixels with fewer than
/// three unmasked measurements, ill-conditioned closed-form systems, or a
/// search optimum on the box edge are masked.
pub fn reconstruct_stray(meas: &[Measurement], fz: f64, opts: &ReconOptions) -> Result<StrayFieldResult> {
    if meas.len() < 3 {
        return Err(ReconError::TooFewMeasurements {
            needed: 3,
            got: meas.len(),
        });
    }
    for (i, a) in meas.iter().enumerate() {
        if meas[..i].iter().any(|b| b.label == a.label) {
            return Err(ReconError::DuplicateLabel(a.label.clone()));
        }
    }
    let spec = meas[0].applied.spec;
    for m in meas {
        spec.ensure_same(&m.applied.spec)?;
        spec.ensure_same(&m.magnitude.spec)?;
    }
    if opts.method == Method::RandomSearch {
        opts.search.bounds.validate()?;
    }
    let stream = seed::label_stream("reconstruct");
    struct Px {
        s: Option<[f64; 2]>,
        residual: f64,
        cond: f64,
        ill: bool,
        edge: bool,
    }
    let pixels: Vec<Px> = (0..spec.len())
        .into_par_iter()
        .map(|i| {
            let mut f = Vec::with_capacity(meas.len());
            let mut mags = Vec::with_capacity(meas.len());
            for m in meas {
                if m.magnitude.mask[i] || m.applied.mask[i] {
                    continue;
                }
                f.push([m.applied.fx[i], m.applied.fy[i]]);
                mags.push(m.magnitude.values[i]);
            }
            let none = |cond: f64, ill: bool| Px {
                s: None,
                residual: f64::NAN,
                cond,
                ill,
                edge: false,
            };
            if f.len() < 3 {
                return none(f64::NAN, false);
            }
            let cond = pairwise_condition(&f);
            match opts.method {
                Method::ClosedForm => match reconstruct_pixel_closed(&f, &mags) {
                    Ok(s) => Px {
                        s: Some(s),
                        residual: pixel_residual(&f, &mags, s),
                        cond,
                        ill: false,
                        edge: false,
                    },
                    Err(_) => none(cond, true),
                },
                Method::RandomSearch => {
                    let (ix, iy) = spec.coords(i);
                    let mut rng = seed::pixel_rng(opts.seed, stream, ix, iy);
                    let out = reconstruct_pixel_search(&f, &mags, &opts.search, &mut rng);
                    if out.at_boundary {
                        Px {
                            s: None,
                            residual: out.residual,
                            cond,
                            ill: false,
                            edge: true,
                        }
                    } else {
                        Px {
                            s: Some(out.stray),
                            residual: out.residual,
                            cond,
                            ill: false,
                            edge: false,
                        }
                    }
                }
            }
        })
        .collect();
    let mut stray = VectorGrid::zeros(spec);
    let mut residual = ScalarGrid::filled(spec, Unit::VoltPerCm, 0.0);
    let mut condition = ScalarGrid::filled(spec, Unit::Dimensionless, 0.0);
    let (mut ill, mut edge) = (0, 0);
    for (i, p) in pixels.iter().enumerate() {
        ill += p.ill as usize;
        edge += p.edge as usize;
        condition.values[i] = if p.cond.is_finite() { p.cond } else { 0.0 };
        condition.mask[i] = !p.cond.is_finite();
        match p.s {
            Some(s) => {
                stray.fx[i] = s[0];
                stray.fy[i] = s[1];
                residual.values[i] = p.residual;
            }
            None => {
                stray.mask[i] = true;
                residual.mask[i] = true;
            }
        }
    }
    Ok(StrayFieldResult {
        stray,
        fz,
        residual,
        condition,
        method: opts.method,
        seed: opts.seed,
        ill_conditioned: ill,
        boundary_hits: edge,
    })
}

/// 3 × 3 mean over unmasked neighbours. This smooths the per-pixel
/// estimates; it is not part of the per-pixel inversion.
pub fn neighbor_average(g: &VectorGrid) -> VectorGrid {
    let s = g.spec;
    let mut out = g.clone();
    for iy in 0..s.ny {
        for ix in 0..s.nx {
            let i = s.index(ix, iy);
            if g.mask[i] {
                continue;
            }
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            for jy in iy.saturating_sub(1)..=(iy + 1).min(s.ny - 1) {
                for jx in ix.saturating_sub(1)..=(ix + 1).min(s.nx - 1) {
                    let j = s.index(jx, jy);
                    if !g.mask[j] {
                        sx += g.fx[j];
                        sy += g.fy[j];
                        n += 1.0;
                    }
                }
            }
            out.fx[i] = sx / n;
            out.fy[i] = sy / n;
        }
    }
    out
}

/// One magnitude map with the potentials it was measured under.
#[derive(Debug, Clone)]
pub struct ChargeFitInput<'a> {
    /// Total `|F|` including `fz`, V/cm.
    pub magnitude: &'a ScalarGrid,
    pub pots: &'a PotentialSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChargeFit {
    pub charges: ChargeDensities,
    /// Standard errors of `(σ_g, σ_s)`, C/m².
    pub std_errors: [f64; 2],
    /// RMS of `|F| − m` over the fitted pixels, V/cm.
    pub rms_residual: f64,
    pub pixels: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// Fit parameters are carried in µC/m² so that both species are O(1).
const CHARGE_SCALE: f64 = 1e-6;

/// Per pixel: applied field, gap and surface unit responses, target.
type ChargeRow = ([f64; 2], [f64; 2], [f64; 2], f64);

struct ChargeModel {
    rows: Vec<ChargeRow>,
    fz: f64,
}

impl Model for ChargeModel {
    fn n_residuals(&self) -> usize {
        self.rows.len()
    }

    fn eval(&self, p: &[f64], r: &mut [f64], jac: Option<&mut DMatrix<f64>>) -> bool {
        let (sg, ss) = (p[0] * CHARGE_SCALE, p[1] * CHARGE_SCALE);
        let mut jac = jac;
        for (k, (fa, bg, bs, m)) in self.rows.iter().enumerate() {
            let fx = fa[0] + sg * bg[0] + ss * bs[0];
            let fy = fa[1] + sg * bg[1] + ss * bs[1];
            let mag = (fx * fx + fy * fy + self.fz * self.fz).sqrt();
            r[k] = mag - m;
            if let Some(j) = jac.as_deref_mut() {
                let inv = 1.0 / mag.max(1e-12);
                j[(k, 0)] = (fx * bg[0] + fy * bg[1]) * inv * CHARGE_SCALE;
                j[(k, 1)] = (fx * bs[0] + fy * bs[1]) * inv * CHARGE_SCALE;
            }
        }
        true
    }
}

/// Fit `(σ_g, σ_s)` to one or more total-magnitude maps by damped least
/// squares, starting from zero charge.
pub fn fit_charge_densities(data: &[ChargeFitInput<'_>], basis: &BasisFields, fz: f64) -> Result<ChargeFit> {
    let bg = basis.charge(ChargeSpecies::Gap);
    let bs = basis.charge(ChargeSpecies::Surface);
    let mut rows = Vec::new();
    for d in data {
        basis.spec.ensure_same(&d.magnitude.spec)?;
        let fa = basis.applied(d.pots);
        for (i, m) in d.magnitude.unmasked() {
            if fa.mask[i] || bg.mask[i] || bs.mask[i] {
                continue;
            }
            rows.push(([fa.fx[i], fa.fy[i]], [bg.fx[i], bg.fy[i]], [bs.fx[i], bs.fy[i]], m));
        }
    }
    if rows.len() < 3 {
        return Err(ReconError::EmptyRegion);
    }
    let model = ChargeModel { rows, fz };
    let res = lm::minimize(&model, &[0.0, 0.0], &LmOptions::default());
    if !res.cost.is_finite() {
        return Err(ReconError::ChargeFit("non-finite cost".into()));
    }
    let n = model.rows.len();
    let se = res
        .std_errors
        .as_ref()
        .map(|e| [e[0] * CHARGE_SCALE, e[1] * CHARGE_SCALE])
        .unwrap_or([f64::NAN; 2]);
    Ok(ChargeFit {
        charges: ChargeDensities {
            sigma_g: res.params[0] * CHARGE_SCALE,
            sigma_s: res.params[1] * CHARGE_SCALE,
        },
        std_errors: se,
        rms_residual: (res.cost / n as f64).sqrt(),
        pixels: n,
        iterations: res.iterations,
        converged: res.converged,
    })
}

/// Predicted minus measured in-plane magnitude for a held-out configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Deviation {
    /// Signed, V/cm.
    pub deviation: ScalarGrid,
    pub max_abs: f64,
    pub rms: f64,
}

pub fn validate_superposition(
    stray: &VectorGrid,
    pots: &PotentialSet,
    basis: &BasisFields,
    measured: &ScalarGrid,
) -> Result<Deviation> {
    stray.spec.ensure_same(&basis.spec)?;
    stray.spec.ensure_same(&measured.spec)?;
    let mut predicted = basis.applied(pots);
    predicted.add_scaled(stray, 1.0)?;
    let pm = predicted.magnitude();
    let mut deviation = ScalarGrid::filled(stray.spec, Unit::VoltPerCm, 0.0);
    let (mut max_abs, mut sum2, mut n) = (0.0f64, 0.0, 0usize);
    for i in 0..stray.spec.len() {
        if pm.mask[i] || measured.mask[i] {
            deviation.mask[i] = true;
            continue;
        }
        let d = pm.values[i] - measured.values[i];
        deviation.values[i] = d;
        max_abs = max_abs.max(d.abs());
        sum2 += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(ReconError::EmptyRegion);
    }
    Ok(Deviation {
        deviation,
        max_abs,
        rms: (sum2 / n as f64).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compensation {
    pub pots: PotentialSet,
    /// In-plane `|Σ V_e B_e + S|` over the whole grid, V/cm.
    pub residual: ScalarGrid,
    pub region_max: f64,
    pub region_rms: f64,
    /// Largest uncompensated `|S|` in the region.
    pub stray_max: f64,
    /// `stray_max / region_max`.
    pub reduction: f64,
}

/// Solve `min ‖A v − b‖` restricted to the free variables in `free`, with
/// the others pinned at `pinned`. Minimum-norm in the free variables.
fn pinned_lsq(a: &DMatrix<f64>, b: &DVector<f64>, free: &[bool; 4], pinned: &[f64; 4]) -> [f64; 4] {
    let mut rhs = b.clone();
    for (k, f) in free.iter().enumerate() {
        if !f {
            rhs -= a.column(k) * pinned[k];
        }
    }
    let cols: Vec<usize> = (0..4).filter(|k| free[*k]).collect();
    let mut v = *pinned;
    if cols.is_empty() {
        return v;
    }
    let sub = DMatrix::from_fn(a.nrows(), cols.len(), |r, c| a[(r, cols[c])]);
    let svd = sub.svd(true, true);
    let eps = 1e-12 * svd.singular_values.max();
    let x = svd.solve(&rhs, eps).expect("svd with u and v");
    for (c, k) in cols.iter().enumerate() {
        v[*k] = x[c];
    }
    v
}

/// Electrode potentials minimising `Σ_region |Σ_e V_e B_e + S|²`. Without
/// bounds this is the minimum-norm least-squares solution; with bounds every
/// active set (each potential free, at its lower or at its upper bound) is
/// tried and the best feasible one kept.
pub fn compensate(
    stray: &VectorGrid,
    basis: &BasisFields,
    region: &[bool],
    bounds: Option<[(f64, f64); 4]>,
    label: &str,
) -> Result<Compensation> {
    stray.spec.ensure_same(&basis.spec)?;
    let idx: Vec<usize> = (0..stray.spec.len())
        .filter(|i| region.get(*i).copied().unwrap_or(false) && !stray.mask[*i])
        .collect();
    if idx.is_empty() {
        return Err(ReconError::EmptyRegion);
    }
    if let Some(bs) = &bounds {
        if bs.iter().any(|(lo, hi)| !(lo <= hi)) {
            return Err(ReconError::Bounds(format!("{bs:?}")));
        }
    }
    let n = idx.len();
    let a = DMatrix::from_fn(2 * n, 4, |r, c| {
        let g = basis.electrode(Electrode::ALL[c]);
        let i = idx[r / 2];
        if r % 2 == 0 {
            g.fx[i]
        } else {
            g.fy[i]
        }
    });
    let b = DVector::from_fn(2 * n, |r, _| {
        let i = idx[r / 2];
        if r % 2 == 0 {
            -stray.fx[i]
        } else {
            -stray.fy[i]
        }
    });
    let cost = |v: &[f64; 4]| (&a * DVector::from_column_slice(v) - &b).norm_squared();
    let v = match bounds {
        None => pinned_lsq(&a, &b, &[true; 4], &[0.0; 4]),
        Some(bs) => {
            let inside = |v: &[f64; 4]| {
                v.iter()
                    .zip(&bs)
                    .all(|(x, (lo, hi))| *x >= lo - 1e-12 && *x <= hi + 1e-12)
            };
            let mut best: Option<([f64; 4], f64)> = None;
            for code in 0..81usize {
                let mut free = [false; 4];
                let mut pinned = [0.0; 4];
                let mut c = code;
                for k in 0..4 {
                    match c % 3 {
                        0 => free[k] = true,
                        1 => pinned[k] = bs[k].0,
                        _ => pinned[k] = bs[k].1,
                    }
                    c /= 3;
                }
                let v = pinned_lsq(&a, &b, &free, &pinned);
                if !inside(&v) {
                    continue;
                }
                let cv = cost(&v);
                if best.is_none_or(|(_, cb)| cv < cb - 1e-15 * cb.abs()) {
                    best = Some((v, cv));
                }
            }
            best.expect("the all-pinned corner is always feasible").0
        }
    };
    let pots = PotentialSet::from_array(label, v);
    let mut total = basis.applied(&pots);
    total.add_scaled(stray, 1.0)?;
    let residual = total.magnitude();
    let sm = stray.magnitude();
    let (mut rmax, mut r2, mut smax) = (0.0f64, 0.0, 0.0f64);
    for &i in &idx {
        rmax = rmax.max(residual.values[i]);
        r2 += residual.values[i] * residual.values[i];
        smax = smax.max(sm.values[i]);
    }
    Ok(Compensation {
        pots,
        residual,
        region_max: rmax,
        region_rms: (r2 / n as f64).sqrt(),
        stray_max: smax,
        reduction: if rmax > 0.0 { smax / rmax } else { f64::INFINITY },
    })
}
