//! Coherent 34s ↔ 34p transfer under a resonant CPW drive, per-pixel fits of
//! the drive scale factor `s` and the quasi-static two-mode CPW field shape.
//!
//! Units: drive amplitude Θ in V, `s` in (rad/ns)/V, detuning in MHz, time
//! in ns, microwave field in mV/cm.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::electrostatics::{BasisFields, Electrode};
use crate::grid::{GridError, GridSpec, ScalarGrid, Unit, VectorGrid};
use crate::lm::{self, LmOptions, Model};
use crate::seed;
use crate::stark::StarkConstants;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

#[derive(Debug, Error)]
pub enum MicrowaveError {
    #[error("invalid drive amplitudes: {0}")]
    Thetas(String),
    #[error("invalid Rabi campaign: {0}")]
    Campaign(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, MicrowaveError>;

/// Angular Rabi frequency `d·F/ħ`, rad/ns, for a field in mV/cm.
pub fn rabi_rate(f_mu: f64, consts: &StarkConstants) -> f64 {
    consts.rabi_per_mv_cm() * f_mu
}

/// Detuning in MHz as an angular frequency in rad/ns.
pub fn angular_detuning(delta_mhz: f64) -> f64 {
    TWO_PI * delta_mhz * 1e-3
}

/// `sqrt((2πΔ)² + Ω_R²)`, rad/ns.
pub fn effective_rate(delta_mhz: f64, f_mu: f64, consts: &StarkConstants) -> f64 {
    angular_detuning(delta_mhz).hypot(rabi_rate(f_mu, consts))
}

/// Population left in 34s after a square pulse of length `t` at drive
/// amplitude Θ. The transferred population decays as `exp(−t/(2τ))`.
pub fn transfer_probability(theta: f64, s: f64, delta_mhz: f64, t: f64, tau: f64) -> f64 {
    1.0 - transferred(s * theta, angular_detuning(delta_mhz), t, tau)
}

fn transferred(rabi: f64, delta: f64, t: f64, tau: f64) -> f64 {
    let eff = rabi.hypot(delta);
    if eff == 0.0 {
        return 0.0;
    }
    let ratio = rabi / eff;
    let sn = (0.5 * eff * t).sin();
    ratio * ratio * sn * sn * (-t / (2.0 * tau)).exp()
}

/// Derivative of the transferred population by `s`.
fn transferred_ds(theta: f64, s: f64, delta: f64, t: f64, tau: f64) -> f64 {
    let r = s * theta;
    let e2 = r * r + delta * delta;
    if e2 == 0.0 {
        return 0.0;
    }
    let e = e2.sqrt();
    let sn = (0.5 * e * t).sin();
    let damp = (-t / (2.0 * tau)).exp();
    damp * (2.0 * r * theta * delta * delta / (e2 * e2) * sn * sn
        + r * r / e2 * 0.5 * t * (e * t).sin() * r * theta / e)
}

/// Populations measured at one pixel for a sweep of drive amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct RabiCurve {
    pub thetas: Vec<f64>,
    pub populations: Vec<f64>,
    pub ix: usize,
    pub iy: usize,
    pub pulse_ns: f64,
    pub detuning: f64,
}

fn check_thetas(thetas: &[f64]) -> Result<()> {
    if thetas.len() < 3 {
        return Err(MicrowaveError::Thetas(format!(
            "need at least 3 amplitudes, got {}",
            thetas.len()
        )));
    }
    if thetas.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(MicrowaveError::Thetas(
            "amplitudes must be finite and non-negative".into(),
        ));
    }
    if thetas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(MicrowaveError::Thetas("amplitudes must be strictly ascending".into()));
    }
    Ok(())
}

/// `n` evenly spaced amplitudes from 0 to `max`.
pub fn theta_sweep(max: f64, n: usize) -> Result<Vec<f64>> {
    if n < 3 || !(max > 0.0) {
        return Err(MicrowaveError::Thetas(format!("bad sweep 0..{max} with {n} points")));
    }
    Ok((0..n).map(|k| max * k as f64 / (n - 1) as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RabiStatus {
    Ok,
    NoExtremum,
    NotConverged,
    /// Detuning unknown at this pixel.
    NoDetuning,
}

impl fmt::Display for RabiStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RabiStatus::Ok => "ok",
            RabiStatus::NoExtremum => "no_extremum",
            RabiStatus::NotConverged => "not_converged",
            RabiStatus::NoDetuning => "no_detuning",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RabiFit {
    pub s: f64,
    pub std_error: f64,
    pub rms_residual: f64,
    pub status: RabiStatus,
}

impl RabiFit {
    fn failed(status: RabiStatus) -> Self {
        RabiFit {
            s: f64::NAN,
            std_error: f64::NAN,
            rms_residual: f64::NAN,
            status,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RabiFitOptions {
    /// Transferred-population decay time, ns.
    pub tau_ns: f64,
    /// Smallest dip below 1 that counts as a transfer minimum.
    pub min_depth: f64,
    /// Required recovery after the minimum, as a fraction of its depth.
    pub min_rebound: f64,
    pub lm: LmOptions,
}

impl Default for RabiFitOptions {
    fn default() -> Self {
        RabiFitOptions {
            tau_ns: 2000.0,
            min_depth: 0.1,
            min_rebound: 0.25,
            lm: LmOptions::default(),
        }
    }
}

/// Whether the 3-point running mean of the populations has a transfer
/// minimum deep enough to fit, followed by a rebound.
fn has_transfer_minimum(pops: &[f64], opts: &RabiFitOptions) -> bool {
    let n = pops.len();
    let smooth: Vec<f64> = (0..n)
        .map(|k| {
            let lo = k.saturating_sub(1);
            let hi = (k + 1).min(n - 1);
            pops[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let deepest = smooth.iter().cloned().fold(f64::INFINITY, f64::min);
    let depth = 1.0 - deepest;
    if depth < opts.min_depth {
        return false;
    }
    // first local minimum reaching at least half the deepest dip
    let Some(k) = (1..n - 1)
        .find(|&k| smooth[k] <= smooth[k - 1] && smooth[k] <= smooth[k + 1] && 1.0 - smooth[k] >= 0.5 * depth)
    else {
        return false;
    };
    let rebound = smooth[k + 1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max) - smooth[k];
    rebound >= opts.min_rebound * (1.0 - smooth[k])
}

struct RabiModel<'a> {
    curve: &'a RabiCurve,
    delta: f64,
    tau: f64,
}

impl Model for RabiModel<'_> {
    fn n_residuals(&self) -> usize {
        self.curve.thetas.len()
    }

    fn eval(&self, p: &[f64], r: &mut [f64], jac: Option<&mut DMatrix<f64>>) -> bool {
        let s = p[0];
        if !(s > 0.0) {
            return false;
        }
        let t = self.curve.pulse_ns;
        let mut jac = jac;
        for (k, (&th, &y)) in self.curve.thetas.iter().zip(&self.curve.populations).enumerate() {
            r[k] = 1.0 - transferred(s * th, self.delta, t, self.tau) - y;
            if let Some(j) = jac.as_deref_mut() {
                j[(k, 0)] = -transferred_ds(th, s, self.delta, t, self.tau);
            }
        }
        true
    }
}

/// Relative step of the scan that seeds the `s` fit.
const SCAN_STEP: f64 = 0.005;

/// Scanned `s` with the lowest cost. The scan runs from a quarter turn at
/// the largest amplitude up to half a turn per amplitude step.
fn scan_seed(model: &RabiModel<'_>) -> Option<f64> {
    let c = model.curve;
    let n = c.thetas.len();
    let top = c.thetas[n - 1] * c.pulse_ns;
    let lo = 0.5 * std::f64::consts::FRAC_PI_2 / top;
    let hi = (n - 1) as f64 * std::f64::consts::PI / top;
    let steps = ((hi / lo).ln() / SCAN_STEP).ceil() as usize;
    let mut r = vec![0.0; n];
    (0..=steps)
        .map(|k| lo * (k as f64 * SCAN_STEP).exp())
        .map(|s| {
            let cost = if model.eval(&[s], &mut r, None) {
                r.iter().map(|v| v * v).sum::<f64>()
            } else {
                f64::NAN
            };
            (s, cost)
        })
        .filter(|(_, c)| c.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(s, _)| s)
}

/// Least-squares `s` for one curve with known detuning and pulse length,
/// started from the first transfer minimum.
pub fn fit_s(curve: &RabiCurve, opts: &RabiFitOptions) -> RabiFit {
    if check_thetas(&curve.thetas).is_err() || curve.populations.len() != curve.thetas.len() {
        return RabiFit::failed(RabiStatus::NoExtremum);
    }
    if !curve.detuning.is_finite() {
        return RabiFit::failed(RabiStatus::NoDetuning);
    }
    if !has_transfer_minimum(&curve.populations, opts) {
        return RabiFit::failed(RabiStatus::NoExtremum);
    }
    let model = RabiModel {
        curve,
        delta: angular_detuning(curve.detuning),
        tau: opts.tau_ns,
    };
    // the cost oscillates in s under detuning, so seed from a dense scan
    let Some(seed) = scan_seed(&model) else {
        return RabiFit::failed(RabiStatus::NotConverged);
    };
    let res = lm::minimize(&model, &[seed], &opts.lm);
    if !res.cost.is_finite() {
        return RabiFit::failed(RabiStatus::NotConverged);
    }
    RabiFit {
        s: res.params[0],
        std_error: res.std_errors.as_ref().map_or(f64::NAN, |e| e[0]),
        rms_residual: (res.cost / curve.thetas.len() as f64).sqrt(),
        status: if res.converged {
            RabiStatus::Ok
        } else {
            RabiStatus::NotConverged
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RabiMeta {
    pub label: String,
    pub pulse_ns: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl Default for RabiMeta {
    fn default() -> Self {
        RabiMeta {
            label: "rabi".into(),
            pulse_ns: 400.0,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }
}

/// Rabi curves for every pixel of a grid, sharing one amplitude sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RabiCampaign {
    pub spec: GridSpec,
    pub thetas: Vec<f64>,
    /// Pixel-major: `populations[idx·n + k]`.
    pub populations: Vec<f64>,
    pub mask: Vec<bool>,
    pub meta: RabiMeta,
}

impl RabiCampaign {
    pub fn new(
        spec: GridSpec,
        thetas: Vec<f64>,
        populations: Vec<f64>,
        mask: Vec<bool>,
        meta: RabiMeta,
    ) -> Result<Self> {
        check_thetas(&thetas)?;
        if populations.len() != spec.len() * thetas.len() || mask.len() != spec.len() {
            return Err(MicrowaveError::Campaign(format!(
                "{} populations and {} mask entries for {} pixels × {} amplitudes",
                populations.len(),
                mask.len(),
                spec.len(),
                thetas.len()
            )));
        }
        if !(meta.pulse_ns > 0.0) {
            return Err(MicrowaveError::Campaign(format!("pulse length {} ns", meta.pulse_ns)));
        }
        Ok(RabiCampaign {
            spec,
            thetas,
            populations,
            mask,
            meta,
        })
    }

    pub fn curve(&self, idx: usize, detuning: f64) -> RabiCurve {
        let n = self.thetas.len();
        let (ix, iy) = self.spec.coords(idx);
        RabiCurve {
            thetas: self.thetas.clone(),
            populations: self.populations[idx * n..(idx + 1) * n].to_vec(),
            ix,
            iy,
            pulse_ns: self.meta.pulse_ns,
            detuning,
        }
    }

    pub fn write(&self, path: &Path, extra_header: &[String]) -> Result<()> {
        let io = |source| MicrowaveError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        self.write_to(&mut w, extra_header).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn write_to<W: Write>(&self, w: &mut W, extra_header: &[String]) -> std::io::Result<()> {
        writeln!(w, "# kind rabi_campaign")?;
        writeln!(w, "# gridspec {}", self.spec)?;
        writeln!(w, "# label {}", self.meta.label)?;
        writeln!(w, "# pulse_ns {}", self.meta.pulse_ns)?;
        writeln!(w, "# noise_sigma {}", self.meta.noise_sigma)?;
        writeln!(w, "# noise_seed {}", self.meta.noise_seed)?;
        writeln!(w, "# amplitudes {}", self.thetas.len())?;
        for h in extra_header {
            writeln!(w, "# {h}")?;
        }
        let n = self.thetas.len();
        for i in 0..self.spec.len() {
            if self.mask[i] {
                continue;
            }
            let (ix, iy) = self.spec.coords(i);
            for (th, p) in self.thetas.iter().zip(&self.populations[i * n..(i + 1) * n]) {
                writeln!(w, "{ix},{iy},{th},{p}")?;
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<RabiCampaign> {
        let f = File::open(path).map_err(|source| MicrowaveError::Io {
            path: path.display().to_string(),
            source,
        })?;
        RabiCampaign::read_from(BufReader::new(f))
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<RabiCampaign> {
        let perr = |line: usize, msg: String| MicrowaveError::Parse { line, msg };
        let mut spec: Option<GridSpec> = None;
        let mut meta = RabiMeta::default();
        let mut n_amp: Option<usize> = None;
        let mut rows: Vec<(usize, usize, usize, f64, f64)> = Vec::new();
        for (k, line) in reader.lines().enumerate() {
            let lineno = k + 1;
            let line = line.map_err(|e| perr(lineno, e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                let h = h.trim();
                let (key, val) = h.split_once(' ').unwrap_or((h, ""));
                let num = |v: &str| -> Result<f64> {
                    v.parse()
                        .map_err(|_| perr(lineno, format!("bad number `{v}` for {key}")))
                };
                let count = |v: &str| -> Result<usize> {
                    v.parse()
                        .map_err(|_| perr(lineno, format!("bad count `{v}` for {key}")))
                };
                match key {
                    "kind" if val != "rabi_campaign" => {
                        return Err(perr(lineno, format!("expected kind rabi_campaign, got `{val}`")))
                    }
                    "gridspec" => {
                        let f: Vec<&str> = val.split_whitespace().collect();
                        if f.len() != 6 {
                            return Err(perr(lineno, "gridspec needs 6 fields".into()));
                        }
                        spec = Some(
                            GridSpec::new(
                                count(f[0])?,
                                count(f[1])?,
                                num(f[2])?,
                                num(f[3])?,
                                num(f[4])?,
                                num(f[5])?,
                            )
                            .map_err(|e| perr(lineno, e.to_string()))?,
                        );
                    }
                    "label" => meta.label = val.to_string(),
                    "pulse_ns" => meta.pulse_ns = num(val)?,
                    "noise_sigma" => meta.noise_sigma = num(val)?,
                    "noise_seed" => {
                        meta.noise_seed = val.parse().map_err(|_| perr(lineno, format!("bad seed `{val}`")))?
                    }
                    "amplitudes" => n_amp = Some(count(val)?),
                    _ => {}
                }
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(perr(lineno, format!("expected 4 fields, got {}", f.len())));
            }
            let ix = f[0].parse().map_err(|_| perr(lineno, format!("bad ix `{}`", f[0])))?;
            let iy = f[1].parse().map_err(|_| perr(lineno, format!("bad iy `{}`", f[1])))?;
            let th: f64 = f[2]
                .parse()
                .map_err(|_| perr(lineno, format!("bad theta `{}`", f[2])))?;
            let p: f64 = f[3]
                .parse()
                .map_err(|_| perr(lineno, format!("bad population `{}`", f[3])))?;
            if !th.is_finite() || !p.is_finite() {
                return Err(perr(lineno, "non-finite value".into()));
            }
            rows.push((lineno, ix, iy, th, p));
        }
        let spec = spec.ok_or_else(|| perr(0, "missing gridspec header".into()))?;
        let n = n_amp.ok_or_else(|| perr(0, "missing amplitudes header".into()))?;
        if n == 0 || !rows.len().is_multiple_of(n) {
            return Err(perr(
                0,
                format!("{} rows is not a multiple of {n} amplitudes", rows.len()),
            ));
        }
        let thetas: Vec<f64> = rows.iter().take(n).map(|r| r.3).collect();
        let mut populations = vec![0.0; spec.len() * n];
        let mut mask = vec![true; spec.len()];
        let mut last: Option<usize> = None;
        for block in rows.chunks(n) {
            let (lineno, ix, iy, _, _) = block[0];
            if ix >= spec.nx || iy >= spec.ny {
                return Err(perr(lineno, format!("pixel ({ix}, {iy}) outside {spec}")));
            }
            let idx = spec.index(ix, iy);
            if last.is_some_and(|l| idx <= l) {
                return Err(perr(lineno, "pixels out of row-major order".into()));
            }
            last = Some(idx);
            mask[idx] = false;
            for (k, r) in block.iter().enumerate() {
                if (r.1, r.2) != (ix, iy) || r.3 != thetas[k] {
                    return Err(perr(r.0, "amplitude rows do not match the first pixel".into()));
                }
                populations[idx * n + k] = r.4;
            }
        }
        RabiCampaign::new(spec, thetas, populations, mask, meta)
    }
}

/// Per-pixel detuning of the drive from the shifted transition:
/// `offset − shift`, with `offset` the drive frequency above the zero-field
/// line.
pub fn detuning_map(shift: &ScalarGrid, offset: f64) -> ScalarGrid {
    shift.map(Unit::MHz, |v| offset - v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RabiSynthParams {
    pub pulse_ns: f64,
    pub tau_ns: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub label: String,
}

impl Default for RabiSynthParams {
    fn default() -> Self {
        RabiSynthParams {
            pulse_ns: 400.0,
            tau_ns: 2000.0,
            noise_sigma: 0.0,
            seed: 0,
            label: "rabi".into(),
        }
    }
}

/// Synthetic Rabi campaign for a microwave field map given at the reference
/// amplitude `theta_max`.
pub fn synth_rabi(
    f_mu: &ScalarGrid,
    theta_max: f64,
    detuning: &ScalarGrid,
    thetas: &[f64],
    params: &RabiSynthParams,
    consts: &StarkConstants,
) -> Result<RabiCampaign> {
    check_thetas(thetas)?;
    f_mu.spec.ensure_same(&detuning.spec)?;
    if !(theta_max > 0.0) || !(params.tau_ns > 0.0) || !(params.noise_sigma >= 0.0) {
        return Err(MicrowaveError::Campaign(
            "theta_max and tau must be positive, noise non-negative".into(),
        ));
    }
    let spec = f_mu.spec;
    let n = thetas.len();
    let stream = seed::label_stream(&params.label);
    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mask: Vec<bool> = (0..spec.len()).map(|i| f_mu.mask[i] || detuning.mask[i]).collect();
    let populations: Vec<f64> = (0..spec.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut out = vec![0.0; n];
            if mask[i] {
                return out;
            }
            let s = rabi_rate(f_mu.values[i], consts) / theta_max;
            for (o, &th) in out.iter_mut().zip(thetas) {
                *o = transfer_probability(th, s, detuning.values[i], params.pulse_ns, params.tau_ns);
            }
            if params.noise_sigma > 0.0 {
                let (ix, iy) = spec.coords(i);
                let mut rng = seed::pixel_rng(params.seed, stream, ix, iy);
                for o in &mut out {
                    *o += noise.sample(&mut rng);
                }
            }
            out
        })
        .collect();
    let meta = RabiMeta {
        label: params.label.clone(),
        pulse_ns: params.pulse_ns,
        noise_sigma: params.noise_sigma,
        noise_seed: params.seed,
    };
    RabiCampaign::new(spec, thetas.to_vec(), populations, mask, meta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MwFieldMap {
    /// Microwave field amplitude at `theta_max`, mV/cm.
    pub field: ScalarGrid,
    pub s: ScalarGrid,
    pub s_error: ScalarGrid,
    pub theta_max: f64,
    pub fits: Vec<Option<RabiFit>>,
}

impl MwFieldMap {
    pub fn status_counts(&self) -> Vec<(String, usize)> {
        let mut counts: Vec<(String, usize)> = Vec::new();
        for f in self.fits.iter().flatten() {
            let key = f.status.to_string();
            match counts.iter_mut().find(|(k, _)| *k == key) {
                Some((_, c)) => *c += 1,
                None => counts.push((key, 1)),
            }
        }
        counts
    }
}

/// Fit `s` at every unmasked pixel and convert it to the microwave field at
/// `theta_max`. Pixels without a detuning or a usable fit are masked.
pub fn map_microwave(
    campaign: &RabiCampaign,
    detuning: &ScalarGrid,
    theta_max: f64,
    opts: &RabiFitOptions,
    consts: &StarkConstants,
) -> Result<MwFieldMap> {
    campaign.spec.ensure_same(&detuning.spec)?;
    let spec = campaign.spec;
    let fits: Vec<Option<RabiFit>> = (0..spec.len())
        .into_par_iter()
        .map(|i| {
            if campaign.mask[i] {
                return None;
            }
            if detuning.mask[i] {
                return Some(RabiFit::failed(RabiStatus::NoDetuning));
            }
            Some(fit_s(&campaign.curve(i, detuning.values[i]), opts))
        })
        .collect();
    let per = consts.rabi_per_mv_cm();
    let pick = |f: &Option<RabiFit>, g: fn(&RabiFit) -> f64| match f {
        Some(r) if r.status == RabiStatus::Ok => g(r),
        _ => f64::NAN,
    };
    let s = ScalarGrid::from_values(
        spec,
        Unit::RadPerNsPerVolt,
        fits.iter().map(|f| pick(f, |r| r.s)).collect(),
    )?;
    let mut s_error = ScalarGrid::from_values(
        spec,
        Unit::RadPerNsPerVolt,
        fits.iter().map(|f| pick(f, |r| r.std_error)).collect(),
    )?;
    // a usable fit with an undefined error keeps its value unmasked
    s_error.mask = s.mask.clone();
    let field = s.map(Unit::MilliVoltPerCm, |v| v * theta_max / per);
    Ok(MwFieldMap {
        field,
        s,
        s_error,
        theta_max,
        fits,
    })
}

/// Quasi-static CPW mode `a·E_cpw + b·E_slot` and its in-plane magnitude
/// normalised to 1 at the maximum. `E_cpw` is the centre-conductor unit
/// field; `E_slot` drives the grounds at `+½` and `−½`.
pub fn mode_field(basis: &BasisFields, a: f64, b: f64) -> (VectorGrid, ScalarGrid) {
    let mut v = basis.electrode(Electrode::Center).scaled(a);
    v.add_scaled(basis.electrode(Electrode::LeftGround), 0.5 * b)
        .expect("basis grids share a spec");
    v.add_scaled(basis.electrode(Electrode::RightGround), -0.5 * b)
        .expect("basis grids share a spec");
    let mag = v.magnitude();
    let peak = mag.range().map_or(0.0, |r| r.1);
    let norm = if peak > 0.0 {
        mag.map(Unit::Dimensionless, |m| m / peak)
    } else {
        mag.map(Unit::Dimensionless, |m| m)
    };
    (v, norm)
}

/// Position `(x, y)` of the largest unmasked value among the pixels where
/// `region` is true (all pixels when `region` is empty).
pub fn peak_position(g: &ScalarGrid, region: &[bool]) -> Option<(f64, f64)> {
    let best = g
        .unmasked()
        .filter(|(i, _)| region.is_empty() || region[*i])
        .max_by(|a, b| a.1.total_cmp(&b.1))?;
    let (ix, iy) = g.spec.coords(best.0);
    Some((g.spec.x(ix), g.spec.y(iy)))
}

/// Mode weights normalised to `a² + b² = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeWeights {
    pub a: f64,
    pub b: f64,
}

/// Weights whose mode maximum over `region` lies closest in x to `x_target`.
/// The mixing angle is scanned on a fine lattice; among equally close
/// candidates the one with the smallest odd weight wins.
pub fn weights_for_peak(
    basis: &BasisFields,
    region: &[bool],
    x_target: f64,
    steps: usize,
) -> Option<(ModeWeights, f64)> {
    let steps = steps.max(2);
    let mut best: Option<(ModeWeights, f64)> = None;
    for k in 0..steps {
        let ang = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * k as f64 / steps as f64;
        let w = ModeWeights {
            a: ang.cos(),
            b: ang.sin(),
        };
        let (_, mag) = mode_field(basis, w.a, w.b);
        let Some((x, _)) = peak_position(&mag, region) else {
            continue;
        };
        let better = match best {
            None => true,
            Some((bw, bx)) => {
                let (d, bd) = ((x - x_target).abs(), (bx - x_target).abs());
                d < bd - 1e-9 || (d <= bd + 1e-9 && w.b.abs() < bw.b.abs())
            }
        };
        if better {
            best = Some((w, x));
        }
    }
    best
}

struct ModeModel {
    rows: Vec<([f64; 2], [f64; 2], f64)>,
}

impl Model for ModeModel {
    fn n_residuals(&self) -> usize {
        self.rows.len()
    }

    fn eval(&self, p: &[f64], r: &mut [f64], jac: Option<&mut DMatrix<f64>>) -> bool {
        let mut jac = jac;
        for (k, (c, sl, y)) in self.rows.iter().enumerate() {
            let vx = p[0] * c[0] + p[1] * sl[0];
            let vy = p[0] * c[1] + p[1] * sl[1];
            let m = vx.hypot(vy);
            r[k] = m - y;
            if let Some(j) = jac.as_deref_mut() {
                let inv = 1.0 / m.max(1e-300);
                j[(k, 0)] = (vx * c[0] + vy * c[1]) * inv;
                j[(k, 1)] = (vx * sl[0] + vy * sl[1]) * inv;
            }
        }
        true
    }
}

/// Fit `target ≈ k·|a·E_cpw + b·E_slot|` over the unmasked target pixels.
/// Returns normalised weights (with `a ≥ 0`), the scale `k` and the RMS
/// residual.
pub fn fit_mode_weights(basis: &BasisFields, target: &ScalarGrid) -> Result<(ModeWeights, f64, f64)> {
    basis.spec.ensure_same(&target.spec)?;
    let c = basis.electrode(Electrode::Center);
    let l = basis.electrode(Electrode::LeftGround);
    let r = basis.electrode(Electrode::RightGround);
    let rows: Vec<_> = target
        .unmasked()
        .map(|(i, y)| {
            (
                [c.fx[i], c.fy[i]],
                [0.5 * (l.fx[i] - r.fx[i]), 0.5 * (l.fy[i] - r.fy[i])],
                y,
            )
        })
        .collect();
    if rows.len() < 3 {
        return Err(MicrowaveError::Campaign("too few target pixels for a mode fit".into()));
    }
    let cmax = rows.iter().map(|(c, _, _)| c[0].hypot(c[1])).fold(0.0, f64::max);
    let tmax = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    let p0 = tmax / cmax.max(1e-300);
    let model = ModeModel { rows };
    let res = [0.0, 1.0, -1.0]
        .iter()
        .map(|q| lm::minimize(&model, &[p0, q * p0], &LmOptions::default()))
        .min_by(|a, b| a.cost.total_cmp(&b.cost))
        .expect("three starts");
    let (p, q) = (res.params[0], res.params[1]);
    let k = p.hypot(q);
    let sign = if p < 0.0 { -1.0 } else { 1.0 };
    let w = ModeWeights {
        a: sign * p / k,
        b: sign * q / k,
    };
    Ok((w, k, (res.cost / model.rows.len() as f64).sqrt()))
}
