//! Per-pixel microwave spectra: synthesis from field maps and Gaussian-dip
//! fits that turn a spectrum stack back into shift and width maps.
//!
//! Detunings are in MHz relative to the zero-field transition frequency.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{GridError, GridSpec, ScalarGrid, Unit, VectorGrid};
use crate::lm::{self, LmOptions, Model};
use crate::seed;
use crate::stark::{fourier_fwhm, StarkConstants, SINC2_FWHM_PRODUCT};

const FOUR_LN2: f64 = 4.0 * std::f64::consts::LN_2;

/// Lowest fitted shift accepted as noise around zero, MHz.
pub const MIN_SHIFT: f64 = -0.5;

#[derive(Debug, Error)]
pub enum SpectroError {
    #[error("invalid detunings: {0}")]
    Detunings(String),
    #[error("invalid stack: {0}")]
    Stack(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, SpectroError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineShape {
    Gaussian,
    /// Power spectrum of a square pulse, scaled to the same FWHM.
    Sinc2,
}

impl fmt::Display for LineShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LineShape::Gaussian => "gaussian",
            LineShape::Sinc2 => "sinc2",
        })
    }
}

impl FromStr for LineShape {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(LineShape::Gaussian),
            "sinc2" => Ok(LineShape::Sinc2),
            other => Err(format!("unknown line shape `{other}`")),
        }
    }
}

/// How `k × k` blocks of pixel spectra are combined before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinMode {
    Mean,
    Sum,
}

impl fmt::Display for BinMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BinMode::Mean => "mean",
            BinMode::Sum => "sum",
        })
    }
}

impl FromStr for BinMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mean" => Ok(BinMode::Mean),
            "sum" => Ok(BinMode::Sum),
            other => Err(format!("unknown binning mode `{other}`")),
        }
    }
}

pub fn gaussian_dip(delta: f64, baseline: f64, depth: f64, center: f64, fwhm: f64) -> f64 {
    let u = (delta - center) / fwhm;
    baseline - depth * (-FOUR_LN2 * u * u).exp()
}

pub fn sinc2_dip(delta: f64, baseline: f64, depth: f64, center: f64, fwhm: f64) -> f64 {
    let u = std::f64::consts::PI * SINC2_FWHM_PRODUCT * (delta - center) / fwhm;
    let s = if u.abs() < 1e-12 { 1.0 } else { u.sin() / u };
    baseline - depth * s * s
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackMeta {
    /// Potential-set label the stack belongs to.
    pub label: String,
    pub pulse_ns: f64,
    pub amplitude: String,
    pub binning: usize,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl Default for StackMeta {
    fn default() -> Self {
        StackMeta {
            label: String::new(),
            pulse_ns: 200.0,
            amplitude: "low".into(),
            binning: 1,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }
}

/// Relative 34s population per pixel and detuning.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumStack {
    pub spec: GridSpec,
    /// Strictly increasing, MHz.
    pub detunings: Vec<f64>,
    /// Pixel-major: spectrum of pixel `i` is
    /// `intensities[i*n .. (i+1)*n]` with `n = detunings.len()`.
    pub intensities: Vec<f64>,
    /// Pixels without atoms or data.
    pub mask: Vec<bool>,
    pub meta: StackMeta,
}

fn check_detunings(d: &[f64]) -> Result<()> {
    if d.is_empty() {
        return Err(SpectroError::Detunings("no detunings".into()));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(SpectroError::Detunings("non-finite detuning".into()));
    }
    if d.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SpectroError::Detunings("detunings must be strictly increasing".into()));
    }
    Ok(())
}

/// `n` evenly spaced detunings from `start` to `stop` inclusive.
pub fn detuning_range(start: f64, stop: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 || !(stop > start) {
        return Err(SpectroError::Detunings(format!(
            "need n >= 2 and stop > start, got {n} points over [{start}, {stop}]"
        )));
    }
    let step = (stop - start) / (n - 1) as f64;
    Ok((0..n).map(|k| start + k as f64 * step).collect())
}

impl SpectrumStack {
    pub fn new(
        spec: GridSpec,
        detunings: Vec<f64>,
        intensities: Vec<f64>,
        mask: Vec<bool>,
        meta: StackMeta,
    ) -> Result<Self> {
        check_detunings(&detunings)?;
        if intensities.len() != spec.len() * detunings.len() || mask.len() != spec.len() {
            return Err(SpectroError::Stack(format!(
                "{} intensities and {} mask entries for {} pixels × {} detunings",
                intensities.len(),
                mask.len(),
                spec.len(),
                detunings.len()
            )));
        }
        Ok(SpectrumStack {
            spec,
            detunings,
            intensities,
            mask,
            meta,
        })
    }

    pub fn n_detunings(&self) -> usize {
        self.detunings.len()
    }

    pub fn spectrum(&self, idx: usize) -> &[f64] {
        let n = self.n_detunings();
        &self.intensities[idx * n..(idx + 1) * n]
    }

    /// Combine `k × k` pixel blocks. Masked pixels are left out of a block;
    /// a block with no unmasked pixel is masked.
    pub fn binned(&self, k: usize, mode: BinMode) -> Result<SpectrumStack> {
        if k == 1 {
            return Ok(self.clone());
        }
        let spec = self.spec.binned(k)?;
        let n = self.n_detunings();
        let mut intensities = vec![0.0; spec.len() * n];
        let mut mask = vec![true; spec.len()];
        for by in 0..spec.ny {
            for bx in 0..spec.nx {
                let dst = spec.index(bx, by);
                let mut count = 0usize;
                let out = &mut intensities[dst * n..(dst + 1) * n];
                for iy in by * k..(by + 1) * k {
                    for ix in bx * k..(bx + 1) * k {
                        let src = self.spec.index(ix, iy);
                        if self.mask[src] {
                            continue;
                        }
                        count += 1;
                        for (o, v) in out.iter_mut().zip(self.spectrum(src)) {
                            *o += v;
                        }
                    }
                }
                if count > 0 {
                    mask[dst] = false;
                    if mode == BinMode::Mean {
                        out.iter_mut().for_each(|o| *o /= count as f64);
                    }
                }
            }
        }
        let mut meta = self.meta.clone();
        meta.binning *= k;
        SpectrumStack::new(spec, self.detunings.clone(), intensities, mask, meta)
    }

    pub fn write(&self, path: &Path, extra_header: &[String]) -> Result<()> {
        let io = |e| SpectroError::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        self.write_to(&mut w, extra_header).map_err(io)?;
        w.flush().map_err(io)
    }

    /// Masked pixels have no rows.
    pub fn write_to<W: Write>(&self, w: &mut W, extra_header: &[String]) -> std::io::Result<()> {
        let m = &self.meta;
        writeln!(w, "# kind spectrum_stack")?;
        writeln!(w, "# gridspec {}", self.spec)?;
        writeln!(w, "# label {}", m.label)?;
        writeln!(w, "# pulse_ns {}", m.pulse_ns)?;
        writeln!(w, "# amplitude {}", m.amplitude)?;
        writeln!(w, "# binning {}", m.binning)?;
        writeln!(w, "# noise_sigma {}", m.noise_sigma)?;
        writeln!(w, "# noise_seed {}", m.noise_seed)?;
        writeln!(w, "# detunings {}", self.n_detunings())?;
        for h in extra_header {
            writeln!(w, "# {h}")?;
        }
        for i in 0..self.spec.len() {
            if self.mask[i] {
                continue;
            }
            let (ix, iy) = self.spec.coords(i);
            for (d, v) in self.detunings.iter().zip(self.spectrum(i)) {
                writeln!(w, "{ix},{iy},{d},{v}")?;
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<SpectrumStack> {
        let f = File::open(path).map_err(|e| SpectroError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::read_from(BufReader::new(f))
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<SpectrumStack> {
        let perr = |line: usize, msg: String| SpectroError::Parse { line, msg };
        let mut spec: Option<GridSpec> = None;
        let mut meta = StackMeta::default();
        let mut n_det: Option<usize> = None;
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
                match key {
                    "kind" if val != "spectrum_stack" => {
                        return Err(perr(lineno, format!("expected kind spectrum_stack, got `{val}`")))
                    }
                    "gridspec" => {
                        let f: Vec<&str> = val.split_whitespace().collect();
                        if f.len() != 6 {
                            return Err(perr(lineno, "gridspec needs 6 fields".into()));
                        }
                        let n = |s: &str| s.parse::<usize>().map_err(|_| perr(lineno, format!("bad count `{s}`")));
                        spec = Some(
                            GridSpec::new(n(f[0])?, n(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?, num(f[5])?)
                                .map_err(|e| perr(lineno, e.to_string()))?,
                        );
                    }
                    "label" => meta.label = val.to_string(),
                    "pulse_ns" => meta.pulse_ns = num(val)?,
                    "amplitude" => meta.amplitude = val.to_string(),
                    "binning" => meta.binning = num(val)? as usize,
                    "noise_sigma" => meta.noise_sigma = num(val)?,
                    "noise_seed" => {
                        meta.noise_seed = val.parse().map_err(|_| perr(lineno, format!("bad seed `{val}`")))?
                    }
                    "detunings" => n_det = Some(val.parse().map_err(|_| perr(lineno, format!("bad count `{val}`")))?),
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
            let d: f64 = f[2]
                .parse()
                .map_err(|_| perr(lineno, format!("bad detuning `{}`", f[2])))?;
            let v: f64 = f[3]
                .parse()
                .map_err(|_| perr(lineno, format!("bad intensity `{}`", f[3])))?;
            if !d.is_finite() || !v.is_finite() {
                return Err(perr(lineno, "non-finite value".into()));
            }
            rows.push((lineno, ix, iy, d, v));
        }
        let spec = spec.ok_or_else(|| perr(0, "missing gridspec header".into()))?;
        let n = n_det.ok_or_else(|| perr(0, "missing detunings header".into()))?;
        if n == 0 || !rows.len().is_multiple_of(n) {
            return Err(perr(
                0,
                format!("{} rows is not a multiple of {n} detunings", rows.len()),
            ));
        }
        let detunings: Vec<f64> = rows.iter().take(n).map(|r| r.3).collect();
        check_detunings(&detunings)?;
        let mut intensities = vec![f64::NAN; spec.len() * n];
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
                if (r.1, r.2) != (ix, iy) || r.3 != detunings[k] {
                    return Err(perr(r.0, "detuning rows do not match the first pixel".into()));
                }
                intensities[idx * n + k] = r.4;
            }
        }
        for (i, m) in mask.iter().enumerate() {
            if *m {
                intensities[i * n..(i + 1) * n].fill(0.0);
            }
        }
        SpectrumStack::new(spec, detunings, intensities, mask, meta)
    }
}

/// Synthesis settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub pulse_ns: f64,
    pub depth: f64,
    pub baseline: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub shape: LineShape,
    pub label: String,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            pulse_ns: 200.0,
            depth: 0.8,
            baseline: 1.0,
            noise_sigma: 0.0,
            seed: 0,
            shape: LineShape::Gaussian,
            label: String::new(),
        }
    }
}

/// Half the largest magnitude difference to an unmasked 4-neighbour.
pub fn intra_pixel_spread(mag: &ScalarGrid) -> Vec<f64> {
    let s = mag.spec;
    let mut out = vec![0.0; s.len()];
    for iy in 0..s.ny {
        for ix in 0..s.nx {
            let i = s.index(ix, iy);
            if mag.mask[i] {
                continue;
            }
            let mut worst = 0.0f64;
            let mut probe = |jx: usize, jy: usize| {
                let j = s.index(jx, jy);
                if !mag.mask[j] {
                    worst = worst.max((mag.values[j] - mag.values[i]).abs());
                }
            };
            if ix > 0 {
                probe(ix - 1, iy);
            }
            if ix + 1 < s.nx {
                probe(ix + 1, iy);
            }
            if iy > 0 {
                probe(ix, iy - 1);
            }
            if iy + 1 < s.ny {
                probe(ix, iy + 1);
            }
            out[i] = 0.5 * worst;
        }
    }
    out
}

/// Total field magnitude including a uniform out-of-plane component.
pub fn total_magnitude(field: &VectorGrid, fz: f64) -> ScalarGrid {
    let mut m = field.magnitude();
    for v in &mut m.values {
        *v = v.hypot(fz);
    }
    m
}

/// Forward model: one dip per pixel at the Stark shift of the total field,
/// broadened by the intra-pixel field spread.
pub fn synth_stack(
    field: &VectorGrid,
    fz: f64,
    detunings: &[f64],
    params: &SynthParams,
    consts: &StarkConstants,
) -> Result<SpectrumStack> {
    check_detunings(detunings)?;
    if !(params.noise_sigma >= 0.0) {
        return Err(SpectroError::Stack("noise sigma must be non-negative".into()));
    }
    let spec = field.spec;
    let n = detunings.len();
    let mag = total_magnitude(field, fz);
    let spread = intra_pixel_spread(&mag);
    let fwhm0 = fourier_fwhm(params.pulse_ns);
    let stream = seed::label_stream(&params.label);
    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let intensities: Vec<f64> = (0..spec.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut out = vec![0.0; n];
            if mag.mask[i] {
                return out;
            }
            let f = mag.values[i];
            let center = consts.stark_shift_magnitude(f);
            let fwhm = consts.broadened_fwhm(f, spread[i], fwhm0);
            for (o, &d) in out.iter_mut().zip(detunings) {
                *o = match params.shape {
                    LineShape::Gaussian => gaussian_dip(d, params.baseline, params.depth, center, fwhm),
                    LineShape::Sinc2 => sinc2_dip(d, params.baseline, params.depth, center, fwhm),
                };
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
    let meta = StackMeta {
        label: params.label.clone(),
        pulse_ns: params.pulse_ns,
        amplitude: "low".into(),
        binning: 1,
        noise_sigma: params.noise_sigma,
        noise_seed: params.seed,
    };
    SpectrumStack::new(spec, detunings.to_vec(), intensities, field.mask.clone(), meta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStatus {
    Ok,
    TooFewPoints,
    /// No intensity below the baseline.
    NoDip,
    /// Depth below three times the residual noise or its own standard error.
    ShallowDip,
    NotConverged,
    CenterOutOfRange,
    /// Fitted width below the detuning step, so the dip rests on one sample.
    Unresolved,
}

impl fmt::Display for FitStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitStatus::Ok => "ok",
            FitStatus::TooFewPoints => "too_few_points",
            FitStatus::NoDip => "no_dip",
            FitStatus::ShallowDip => "shallow_dip",
            FitStatus::NotConverged => "not_converged",
            FitStatus::CenterOutOfRange => "center_out_of_range",
            FitStatus::Unresolved => "unresolved",
        })
    }
}

/// Result of one Gaussian-dip fit. Standard errors are NaN when unavailable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub baseline: f64,
    pub depth: f64,
    pub center: f64,
    pub fwhm: f64,
    /// In the order baseline, depth, center, fwhm.
    pub std_errors: [f64; 4],
    pub converged: bool,
    pub residual_norm: f64,
    pub iterations: usize,
    pub status: FitStatus,
}

impl LineFit {
    fn failed(status: FitStatus) -> LineFit {
        LineFit {
            baseline: f64::NAN,
            depth: f64::NAN,
            center: f64::NAN,
            fwhm: f64::NAN,
            std_errors: [f64::NAN; 4],
            converged: false,
            residual_norm: f64::NAN,
            iterations: 0,
            status,
        }
    }

    pub fn usable(&self) -> bool {
        self.status == FitStatus::Ok
    }

    pub fn params(&self) -> [f64; 4] {
        [self.baseline, self.depth, self.center, self.fwhm]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Starting FWHM for the automatic initial guess, MHz.
    pub fwhm_init: f64,
    pub lm: LmOptions,
}

impl FitOptions {
    pub fn for_pulse(pulse_ns: f64) -> Self {
        FitOptions {
            fwhm_init: fourier_fwhm(pulse_ns),
            lm: LmOptions::default(),
        }
    }
}

struct DipModel<'a> {
    x: &'a [f64],
    y: &'a [f64],
}

impl Model for DipModel<'_> {
    fn n_residuals(&self) -> usize {
        self.x.len()
    }

    fn eval(&self, p: &[f64], r: &mut [f64], jac: Option<&mut DMatrix<f64>>) -> bool {
        let (b, d, c, w) = (p[0], p[1], p[2], p[3]);
        if !(w > 0.0) || !p.iter().all(|v| v.is_finite()) {
            return false;
        }
        let mut jac = jac;
        for (k, (&x, &y)) in self.x.iter().zip(self.y).enumerate() {
            let u = x - c;
            let g = (-FOUR_LN2 * u * u / (w * w)).exp();
            r[k] = b - d * g - y;
            if let Some(j) = jac.as_deref_mut() {
                j[(k, 0)] = 1.0;
                j[(k, 1)] = -g;
                j[(k, 2)] = -d * g * 2.0 * FOUR_LN2 * u / (w * w);
                j[(k, 3)] = -d * g * 2.0 * FOUR_LN2 * u * u / (w * w * w);
            }
        }
        true
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn min_step(detunings: &[f64]) -> f64 {
    detunings
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Automatic starting point: baseline = median, center = argmin,
/// depth = baseline − min, fwhm = `fwhm_init`.
pub fn auto_init(intensities: &[f64], detunings: &[f64], fwhm_init: f64) -> [f64; 4] {
    let baseline = median(intensities);
    let (kmin, &vmin) = intensities
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty spectrum");
    [baseline, baseline - vmin, detunings[kmin], fwhm_init]
}

/// Fit a Gaussian dip `b − d·exp(−4 ln2 (Δ−c)²/w²)` to one spectrum.
pub fn fit_pixel(intensities: &[f64], detunings: &[f64], init: Option<[f64; 4]>, opts: &FitOptions) -> LineFit {
    let n = detunings.len();
    if n < 5 || intensities.len() != n {
        return LineFit::failed(FitStatus::TooFewPoints);
    }
    let p0 = match init {
        Some(p) => p,
        None => {
            let p = auto_init(intensities, detunings, opts.fwhm_init);
            if !(p[1] > 0.0) {
                return LineFit::failed(FitStatus::NoDip);
            }
            p
        }
    };
    let model = DipModel {
        x: detunings,
        y: intensities,
    };
    let res = lm::minimize(&model, &p0, &opts.lm);
    let [baseline, depth, center, fwhm] = [res.params[0], res.params[1], res.params[2], res.params[3]];
    let sigma_hat = (res.cost / (n - 4) as f64).sqrt();
    let span_lo = detunings[0] - 2.0 * fwhm;
    let span_hi = detunings[n - 1] + 2.0 * fwhm;
    let status = if !res.converged {
        FitStatus::NotConverged
    } else if !(depth > 0.0) {
        FitStatus::NoDip
    } else if depth < 3.0 * sigma_hat || depth < 3.0 * res.std_errors.as_ref().map_or(0.0, |e| e[1]) {
        FitStatus::ShallowDip
    } else if center < span_lo || center > span_hi {
        FitStatus::CenterOutOfRange
    } else if fwhm < min_step(detunings) {
        FitStatus::Unresolved
    } else {
        FitStatus::Ok
    };
    let std_errors = match &res.std_errors {
        Some(e) => [e[0], e[1], e[2], e[3]],
        None => [f64::NAN; 4],
    };
    LineFit {
        baseline,
        depth,
        center,
        fwhm,
        std_errors,
        converged: res.converged,
        residual_norm: res.cost.sqrt(),
        iterations: res.iterations,
        status,
    }
}

/// Shift and width maps of a fitted stack.
#[derive(Debug, Clone, PartialEq)]
pub struct StackFit {
    pub shift: ScalarGrid,
    pub width: ScalarGrid,
    pub fits: Vec<Option<LineFit>>,
}

impl StackFit {
    pub fn status_counts(&self) -> Vec<(String, usize)> {
        let mut counts: Vec<(String, usize)> = Vec::new();
        for f in &self.fits {
            let key = f.map(|f| f.status.to_string()).unwrap_or_else(|| "no_data".into());
            match counts.iter_mut().find(|(k, _)| *k == key) {
                Some((_, c)) => *c += 1,
                None => counts.push((key, 1)),
            }
        }
        counts
    }
}

/// Bin, then fit every unmasked pixel. Failed fits are masked.
pub fn fit_stack(stack: &SpectrumStack, binning: usize, mode: BinMode, opts: &FitOptions) -> Result<StackFit> {
    let st = stack.binned(binning, mode)?;
    let fits: Vec<Option<LineFit>> = (0..st.spec.len())
        .into_par_iter()
        .map(|i| (!st.mask[i]).then(|| fit_pixel(st.spectrum(i), &st.detunings, None, opts)))
        .collect();
    let mut shift = ScalarGrid::filled(st.spec, Unit::MHz, 0.0);
    let mut width = ScalarGrid::filled(st.spec, Unit::MHz, 0.0);
    for (i, f) in fits.iter().enumerate() {
        match f {
            Some(f) if f.usable() => {
                shift.values[i] = f.center;
                width.values[i] = f.fwhm;
            }
            _ => {
                shift.mask[i] = true;
                width.mask[i] = true;
            }
        }
    }
    Ok(StackFit { shift, width, fits })
}

/// In-plane field magnitude from a shift map.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMap {
    /// V/cm.
    pub magnitude: ScalarGrid,
    /// Pixels whose shift implied a negative in-plane `|F|²` and were set to 0.
    pub clamped: Vec<bool>,
}

impl FieldMap {
    pub fn clamped_count(&self) -> usize {
        self.clamped.iter().filter(|c| **c).count()
    }
}

/// `sqrt(max(0, 2·shift/Δα − fz²))`. Shifts below [`MIN_SHIFT`] are masked.
#[allow(clippy::needless_range_loop)]
pub fn field_map_from_shifts(shift: &ScalarGrid, fz: f64, consts: &StarkConstants) -> FieldMap {
    let mut magnitude = ScalarGrid::filled(shift.spec, Unit::VoltPerCm, 0.0);
    let mut clamped = vec![false; shift.spec.len()];
    for i in 0..shift.spec.len() {
        let s = shift.values[i];
        if shift.mask[i] || !(s >= MIN_SHIFT) {
            magnitude.mask[i] = true;
            continue;
        }
        let f2 = 2.0 * s / consts.delta_alpha - fz * fz;
        if f2 < 0.0 {
            clamped[i] = true;
        } else {
            magnitude.values[i] = f2.sqrt();
        }
    }
    FieldMap { magnitude, clamped }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> StarkConstants {
        StarkConstants::default()
    }

    fn det30() -> Vec<f64> {
        detuning_range(-7.0, 22.0, 30).unwrap()
    }

    fn uniform_field(f: f64) -> VectorGrid {
        let spec = GridSpec::new(4, 3, 23.0, 23.0, 0.0, 500.0).unwrap();
        let n = spec.len();
        VectorGrid::from_components(spec, vec![f; n], vec![0.0; n]).unwrap()
    }

    #[test]
    fn zero_field_dip_sits_at_zero_detuning() {
        let d: Vec<f64> = (-10..=10).map(|v| v as f64).collect();
        let st = synth_stack(&uniform_field(0.0), 0.0, &d, &SynthParams::default(), &k()).unwrap();
        let s = st.spectrum(0);
        let kmin = (0..s.len()).min_by(|a, b| s[*a].total_cmp(&s[*b])).unwrap();
        assert_eq!(d[kmin], 0.0);
        assert!((s[kmin] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn uniform_field_centres_every_pixel() {
        let st = synth_stack(&uniform_field(0.1326), 0.0, &det30(), &SynthParams::default(), &k()).unwrap();
        let fit = fit_stack(&st, 1, BinMode::Mean, &FitOptions::for_pulse(200.0)).unwrap();
        for (_, c) in fit.shift.unmasked() {
            assert!((c - 9.48).abs() < 0.005, "{c}");
        }
        assert_eq!(fit.shift.count_unmasked(), 12);
    }

    #[test]
    fn zero_depth_without_noise_is_flat() {
        let p = SynthParams {
            depth: 0.0,
            ..SynthParams::default()
        };
        let st = synth_stack(&uniform_field(0.05), 0.0, &det30(), &p, &k()).unwrap();
        assert!(st.intensities.iter().all(|v| *v == 1.0));
        let fit = fit_pixel(st.spectrum(0), &st.detunings, None, &FitOptions::for_pulse(200.0));
        assert_eq!(fit.status, FitStatus::NoDip);
        assert!(!fit.usable());
    }

    #[test]
    fn noiseless_dip_recovered_to_1e6() {
        let d = det30();
        let truth = [1.0, 0.6, 9.48, 14.67];
        let y: Vec<f64> = d
            .iter()
            .map(|x| gaussian_dip(*x, truth[0], truth[1], truth[2], truth[3]))
            .collect();
        let fit = fit_pixel(&y, &d, None, &FitOptions::for_pulse(200.0));
        assert!(fit.usable(), "{:?}", fit);
        for (a, b) in fit.params().iter().zip(truth) {
            assert!((a - b).abs() <= 1e-6 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn too_few_points_are_rejected() {
        let fit = fit_pixel(
            &[1.0, 0.5, 1.0, 1.0],
            &[0.0, 1.0, 2.0, 3.0],
            None,
            &FitOptions::for_pulse(200.0),
        );
        assert_eq!(fit.status, FitStatus::TooFewPoints);
    }

    #[test]
    fn sinc2_shape_has_requested_fwhm() {
        let w = 4.43;
        let half = sinc2_dip(w / 2.0, 1.0, 1.0, 0.0, w);
        assert!((half - 0.5).abs() < 1e-9, "{half}");
        assert_eq!(sinc2_dip(0.0, 1.0, 0.8, 0.0, w), 1.0 - 0.8);
    }

    #[test]
    fn spread_is_half_largest_neighbour_step() {
        let spec = GridSpec::new(3, 1 + 1, 1.0, 1.0, 0.0, 0.0).unwrap();
        let g = ScalarGrid::from_values(spec, Unit::VoltPerCm, vec![0.0, 0.1, 0.4, 0.0, 0.1, 0.4]).unwrap();
        let s = intra_pixel_spread(&g);
        assert!((s[0] - 0.05).abs() < 1e-12);
        assert!((s[1] - 0.15).abs() < 1e-12);
        assert!((s[2] - 0.15).abs() < 1e-12);
    }

    #[test]
    fn field_map_inversions() {
        let spec = GridSpec::new(2, 2, 1.0, 1.0, 0.0, 0.0).unwrap();
        let fz = 0.05;
        let edge = 0.5 * k().delta_alpha * fz * fz;
        let shifts = ScalarGrid::from_values(spec, Unit::MHz, vec![21.5606, 0.15, edge, -0.2]).unwrap();
        let m = field_map_from_shifts(&shifts, 0.0, &k());
        assert!((m.magnitude.values[0] - 0.2).abs() < 1e-5);
        assert!(
            (m.magnitude.values[1] - 0.0167).abs() < 1e-4,
            "{}",
            m.magnitude.values[1]
        );
        assert!(m.clamped[3] && m.magnitude.values[3] == 0.0);
        let m = field_map_from_shifts(&shifts, fz, &k());
        assert!(m.magnitude.values[2].abs() < 1e-9);
        let mut low = shifts.clone();
        low.values[3] = -0.6;
        assert!(field_map_from_shifts(&low, 0.0, &k()).magnitude.mask[3]);
    }

    #[test]
    fn stack_roundtrip_keeps_mask_and_values() {
        let mut f = uniform_field(0.08);
        f.mask[5] = true;
        let p = SynthParams {
            noise_sigma: 0.02,
            seed: 9,
            label: "a".into(),
            ..SynthParams::default()
        };
        let st = synth_stack(&f, 0.05, &det30(), &p, &k()).unwrap();
        let mut buf = Vec::new();
        st.write_to(&mut buf, &["note x".into()]).unwrap();
        let back = SpectrumStack::read_from(&buf[..]).unwrap();
        assert_eq!(back.mask, st.mask);
        assert_eq!(back.meta, st.meta);
        for i in 0..st.spec.len() {
            if !st.mask[i] {
                assert_eq!(back.spectrum(i), st.spectrum(i));
            }
        }
    }

    #[test]
    fn stack_reader_reports_bad_rows() {
        let text = "# kind spectrum_stack\n# gridspec 2 2 1 1 0 0\n# detunings 2\n0,0,1,0.5\n0,0,x,0.4\n";
        match SpectrumStack::read_from(text.as_bytes()) {
            Err(SpectroError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn noise_is_reproducible_and_label_dependent() {
        let mk = |label: &str| {
            let p = SynthParams {
                noise_sigma: 0.02,
                seed: 3,
                label: label.into(),
                ..SynthParams::default()
            };
            synth_stack(&uniform_field(0.1), 0.0, &det30(), &p, &k()).unwrap()
        };
        assert_eq!(mk("a"), mk("a"));
        assert_ne!(mk("a").intensities, mk("b").intensities);
    }

    #[test]
    fn binned_mean_of_identical_pixels_is_unchanged() {
        let spec = GridSpec::new(4, 4, 23.0, 23.0, 0.0, 500.0).unwrap();
        let n = spec.len();
        let f = VectorGrid::from_components(spec, vec![0.1; n], vec![0.0; n]).unwrap();
        let st = synth_stack(&f, 0.0, &det30(), &SynthParams::default(), &k()).unwrap();
        let b = st.binned(2, BinMode::Mean).unwrap();
        assert_eq!(b.spec.len(), 4);
        assert_eq!(b.meta.binning, 2);
        for (a, v) in b.spectrum(0).iter().zip(st.spectrum(0)) {
            assert!((a - v).abs() < 1e-12);
        }
        let s = st.binned(2, BinMode::Sum).unwrap();
        assert!((s.spectrum(3)[0] - 4.0 * st.spectrum(0)[0]).abs() < 1e-12);
    }

    #[test]
    fn k1_binning_equals_unbinned_fit() {
        let st = synth_stack(&uniform_field(0.07), 0.0, &det30(), &SynthParams::default(), &k()).unwrap();
        let o = FitOptions::for_pulse(200.0);
        let a = fit_stack(&st, 1, BinMode::Mean, &o).unwrap();
        let b = fit_pixel(st.spectrum(0), &st.detunings, None, &o);
        assert_eq!(a.fits[0], Some(b));
    }
}
