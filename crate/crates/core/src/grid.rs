//! Uniform 2D rasters over the (x, y) cross-section above the chip.
//!
//! `x` is measured from the centre-conductor axis and `y` from the chip
//! surface, both in µm. Cell `(ix, iy)` sits at `(x0 + ix*dx, y0 + iy*dy)`.
//! Storage is row-major with `iy` as the row index.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("grid spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("grid has no unmasked pixels")]
    AllMasked,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GridError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        GridError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, GridError>;

/// Geometry of a uniform raster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    /// µm per cell along x.
    pub dx: f64,
    /// µm per cell along y.
    pub dy: f64,
    /// x of cell (0, 0) centre, µm.
    pub x0: f64,
    /// y of cell (0, 0) centre, µm.
    pub y0: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64, x0: f64, y0: f64) -> Result<Self> {
        let spec = GridSpec { nx, ny, dx, dy, x0, y0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(GridError::InvalidSpec(format!(
                "need nx, ny >= 2, got {}x{}",
                self.nx, self.ny
            )));
        }
        if !(self.dx > 0.0 && self.dy > 0.0) || !self.dx.is_finite() || !self.dy.is_finite() {
            return Err(GridError::InvalidSpec(format!(
                "need dx, dy > 0, got {} and {}",
                self.dx, self.dy
            )));
        }
        if !self.x0.is_finite() || !self.y0.is_finite() {
            return Err(GridError::InvalidSpec("non-finite origin".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    #[inline]
    pub fn x(&self, ix: usize) -> f64 {
        self.x0 + ix as f64 * self.dx
    }

    #[inline]
    pub fn y(&self, iy: usize) -> f64 {
        self.y0 + iy as f64 * self.dy
    }

    pub fn x_max(&self) -> f64 {
        self.x(self.nx - 1)
    }

    pub fn y_max(&self) -> f64 {
        self.y(self.ny - 1)
    }

    /// Nearest cell index to a physical position, if it lies on the raster.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = ((x - self.x0) / self.dx).round();
        let fy = ((y - self.y0) / self.dy).round();
        if fx < 0.0 || fy < 0.0 || fx >= self.nx as f64 || fy >= self.ny as f64 {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    /// Sub-raster of `self` covering `[x_min, x_max] × [y_min, y_max]`,
    /// snapped outward onto existing cells.
    pub fn window(&self, x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<(GridSpec, usize, usize)> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(GridError::InvalidSpec("empty window".into()));
        }
        let eps = 1e-9;
        let ix0 = (((x_min - self.x0) / self.dx) + eps).floor().max(0.0) as usize;
        let iy0 = (((y_min - self.y0) / self.dy) + eps).floor().max(0.0) as usize;
        let ix1 = ((((x_max - self.x0) / self.dx) - eps).ceil().max(0.0) as usize).min(self.nx - 1);
        let iy1 = ((((y_max - self.y0) / self.dy) - eps).ceil().max(0.0) as usize).min(self.ny - 1);
        if ix1 <= ix0 || iy1 <= iy0 {
            return Err(GridError::InvalidSpec("window outside raster".into()));
        }
        let spec = GridSpec::new(ix1 - ix0 + 1, iy1 - iy0 + 1, self.dx, self.dy, self.x(ix0), self.y(iy0))?;
        Ok((spec, ix0, iy0))
    }

    /// Raster after averaging blocks of `k × k` cells. Trailing partial
    /// blocks are dropped.
    pub fn binned(&self, k: usize) -> Result<GridSpec> {
        if k == 0 {
            return Err(GridError::InvalidSpec("binning factor must be >= 1".into()));
        }
        let half = (k as f64 - 1.0) / 2.0;
        GridSpec::new(
            self.nx / k,
            self.ny / k,
            self.dx * k as f64,
            self.dy * k as f64,
            self.x0 + half * self.dx,
            self.y0 + half * self.dy,
        )
    }

    /// Equality up to a relative tolerance on the floating-point fields.
    pub fn approx_eq(&self, other: &GridSpec) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
        self.nx == other.nx
            && self.ny == other.ny
            && close(self.dx, other.dx)
            && close(self.dy, other.dy)
            && close(self.x0, other.x0)
            && close(self.y0, other.y0)
    }

    pub fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self.approx_eq(other) {
            Ok(())
        } else {
            Err(GridError::SpecMismatch(format!("{self} vs {other}")))
        }
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {}",
            self.nx, self.ny, self.dx, self.dy, self.x0, self.y0
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Unit {
    MHz,
    VoltPerCm,
    MilliVoltPerCm,
    Volt,
    /// (rad/ns) per volt of CPW drive amplitude.
    RadPerNsPerVolt,
    Dimensionless,
}

impl Unit {
    pub fn as_str(&self) -> &'static str {
        match self {
            Unit::MHz => "MHz",
            Unit::VoltPerCm => "V/cm",
            Unit::MilliVoltPerCm => "mV/cm",
            Unit::Volt => "V",
            Unit::RadPerNsPerVolt => "rad/ns/V",
            Unit::Dimensionless => "dimensionless",
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Unit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "MHz" => Unit::MHz,
            "V/cm" => Unit::VoltPerCm,
            "mV/cm" => Unit::MilliVoltPerCm,
            "V" => Unit::Volt,
            "rad/ns/V" => Unit::RadPerNsPerVolt,
            "dimensionless" => Unit::Dimensionless,
            other => return Err(format!("unknown unit `{other}`")),
        })
    }
}

/// Scalar raster with an explicit mask (`true` = masked).
#[derive(Debug, Clone)]
pub struct ScalarGrid {
    pub spec: GridSpec,
    pub unit: Unit,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ScalarGrid {
    pub fn filled(spec: GridSpec, unit: Unit, value: f64) -> Self {
        ScalarGrid {
            spec,
            unit,
            values: vec![value; spec.len()],
            mask: vec![false; spec.len()],
        }
    }

    pub fn from_values(spec: GridSpec, unit: Unit, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(GridError::InvalidSpec(format!(
                "expected {} values, got {}",
                spec.len(),
                values.len()
            )));
        }
        let mask = values.iter().map(|v| !v.is_finite()).collect();
        Ok(ScalarGrid {
            spec,
            unit,
            values,
            mask,
        })
    }

    pub fn from_fn(spec: GridSpec, unit: Unit, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(spec.len());
        for iy in 0..spec.ny {
            for ix in 0..spec.nx {
                values.push(f(spec.x(ix), spec.y(iy)));
            }
        }
        let mask = values.iter().map(|v| !v.is_finite()).collect();
        ScalarGrid {
            spec,
            unit,
            values,
            mask,
        }
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[self.spec.index(ix, iy)]
    }

    #[inline]
    pub fn is_masked(&self, ix: usize, iy: usize) -> bool {
        self.mask[self.spec.index(ix, iy)]
    }

    /// Value at a pixel if unmasked.
    #[inline]
    pub fn at(&self, idx: usize) -> Option<f64> {
        if self.mask[idx] {
            None
        } else {
            Some(self.values[idx])
        }
    }

    pub fn unmasked(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values
            .iter()
            .zip(&self.mask)
            .enumerate()
            .filter(|(_, (_, m))| !**m)
            .map(|(i, (v, _))| (i, *v))
    }

    pub fn count_unmasked(&self) -> usize {
        self.mask.iter().filter(|m| !**m).count()
    }

    /// (min, max) over unmasked pixels.
    pub fn range(&self) -> Option<(f64, f64)> {
        self.unmasked().fold(None, |acc, (_, v)| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }

    pub fn map(&self, unit: Unit, f: impl Fn(f64) -> f64) -> ScalarGrid {
        ScalarGrid {
            spec: self.spec,
            unit,
            values: self.values.iter().map(|v| f(*v)).collect(),
            mask: self.mask.clone(),
        }
    }

    /// Block average over `k × k` cells; a block is masked only when every
    /// contributing cell is masked.
    pub fn binned(&self, k: usize) -> Result<ScalarGrid> {
        let spec = self.spec.binned(k)?;
        let mut values = vec![0.0; spec.len()];
        let mut mask = vec![true; spec.len()];
        for by in 0..spec.ny {
            for bx in 0..spec.nx {
                let mut sum = 0.0;
                let mut n = 0usize;
                for iy in by * k..(by + 1) * k {
                    for ix in bx * k..(bx + 1) * k {
                        let idx = self.spec.index(ix, iy);
                        if !self.mask[idx] {
                            sum += self.values[idx];
                            n += 1;
                        }
                    }
                }
                let b = spec.index(bx, by);
                if n > 0 {
                    values[b] = sum / n as f64;
                    mask[b] = false;
                }
            }
        }
        Ok(ScalarGrid {
            spec,
            unit: self.unit,
            values,
            mask,
        })
    }
}

impl PartialEq for ScalarGrid {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.unit == other.unit
            && self.mask == other.mask
            && values_eq(&self.values, &other.values)
    }
}

fn values_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x == y || (x.is_nan() && y.is_nan()))
}

/// In-plane vector field raster, components in V/cm.
#[derive(Debug, Clone)]
pub struct VectorGrid {
    pub spec: GridSpec,
    pub fx: Vec<f64>,
    pub fy: Vec<f64>,
    pub mask: Vec<bool>,
}

impl VectorGrid {
    pub fn zeros(spec: GridSpec) -> Self {
        VectorGrid {
            spec,
            fx: vec![0.0; spec.len()],
            fy: vec![0.0; spec.len()],
            mask: vec![false; spec.len()],
        }
    }

    pub fn from_components(spec: GridSpec, fx: Vec<f64>, fy: Vec<f64>) -> Result<Self> {
        if fx.len() != spec.len() || fy.len() != spec.len() {
            return Err(GridError::InvalidSpec("component length mismatch".into()));
        }
        let mask = fx
            .iter()
            .zip(&fy)
            .map(|(a, b)| !(a.is_finite() && b.is_finite()))
            .collect();
        Ok(VectorGrid { spec, fx, fy, mask })
    }

    #[inline]
    pub fn at(&self, idx: usize) -> Option<(f64, f64)> {
        if self.mask[idx] {
            None
        } else {
            Some((self.fx[idx], self.fy[idx]))
        }
    }

    /// Elementwise `sqrt(fx² + fy²)`, V/cm.
    pub fn magnitude(&self) -> ScalarGrid {
        ScalarGrid {
            spec: self.spec,
            unit: Unit::VoltPerCm,
            values: self.fx.iter().zip(&self.fy).map(|(a, b)| a.hypot(*b)).collect(),
            mask: self.mask.clone(),
        }
    }

    pub fn scaled(&self, s: f64) -> VectorGrid {
        VectorGrid {
            spec: self.spec,
            fx: self.fx.iter().map(|v| v * s).collect(),
            fy: self.fy.iter().map(|v| v * s).collect(),
            mask: self.mask.clone(),
        }
    }

    /// `self += s * other`; masks are OR-ed.
    pub fn add_scaled(&mut self, other: &VectorGrid, s: f64) -> Result<()> {
        self.spec.ensure_same(&other.spec)?;
        for i in 0..self.fx.len() {
            self.fx[i] += s * other.fx[i];
            self.fy[i] += s * other.fy[i];
            self.mask[i] |= other.mask[i];
        }
        Ok(())
    }

    pub fn with_mask(mut self, mask: &[bool]) -> VectorGrid {
        for (m, extra) in self.mask.iter_mut().zip(mask) {
            *m |= *extra;
        }
        self
    }

    pub fn binned(&self, k: usize) -> Result<VectorGrid> {
        let split = |vals: &Vec<f64>| ScalarGrid {
            spec: self.spec,
            unit: Unit::VoltPerCm,
            values: vals.clone(),
            mask: self.mask.clone(),
        };
        let bx = split(&self.fx).binned(k)?;
        let by = split(&self.fy).binned(k)?;
        Ok(VectorGrid {
            spec: bx.spec,
            fx: bx.values,
            fy: by.values,
            mask: bx.mask,
        })
    }

    /// Copy a node-aligned sub-window.
    pub fn crop(&self, window: &GridSpec) -> Result<VectorGrid> {
        let (ix0, iy0) = crop_offset(&self.spec, window)?;
        let mut out = VectorGrid::zeros(*window);
        for iy in 0..window.ny {
            for ix in 0..window.nx {
                let src = self.spec.index(ix + ix0, iy + iy0);
                let dst = window.index(ix, iy);
                out.fx[dst] = self.fx[src];
                out.fy[dst] = self.fy[src];
                out.mask[dst] = self.mask[src];
            }
        }
        Ok(out)
    }

    /// Bilinear interpolation onto `target`, which must lie inside this
    /// raster. Node-aligned targets are copied exactly.
    pub fn resample(&self, target: &GridSpec) -> Result<VectorGrid> {
        if crop_offset(&self.spec, target).is_ok() {
            return self.crop(target);
        }
        let s = &self.spec;
        let eps = 1e-9;
        let inside = target.x0 >= s.x0 - eps
            && target.y0 >= s.y0 - eps
            && target.x_max() <= s.x_max() + eps
            && target.y_max() <= s.y_max() + eps;
        if !inside {
            return Err(GridError::SpecMismatch(format!(
                "target {target} extends beyond raster {s}"
            )));
        }
        let locate = |u: f64, n: usize| -> (usize, f64) {
            let u = u.clamp(0.0, (n - 1) as f64);
            let k = (u.floor() as usize).min(n - 2);
            (k, u - k as f64)
        };
        let mut out = VectorGrid::zeros(*target);
        for iy in 0..target.ny {
            let (ky, ty) = locate((target.y(iy) - s.y0) / s.dy, s.ny);
            for ix in 0..target.nx {
                let (kx, tx) = locate((target.x(ix) - s.x0) / s.dx, s.nx);
                let i00 = s.index(kx, ky);
                let i10 = s.index(kx + 1, ky);
                let i01 = s.index(kx, ky + 1);
                let i11 = s.index(kx + 1, ky + 1);
                let w = [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty];
                let blend = |v: &[f64]| w[0] * v[i00] + w[1] * v[i10] + w[2] * v[i01] + w[3] * v[i11];
                let dst = target.index(ix, iy);
                out.fx[dst] = blend(&self.fx);
                out.fy[dst] = blend(&self.fy);
                out.mask[dst] = [i00, i10, i01, i11]
                    .iter()
                    .zip(w)
                    .any(|(i, wi)| wi > 0.0 && self.mask[*i]);
            }
        }
        Ok(out)
    }
}

impl PartialEq for VectorGrid {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.mask == other.mask
            && values_eq(&self.fx, &other.fx)
            && values_eq(&self.fy, &other.fy)
    }
}

fn crop_offset(full: &GridSpec, window: &GridSpec) -> Result<(usize, usize)> {
    let fx = (window.x0 - full.x0) / full.dx;
    let fy = (window.y0 - full.y0) / full.dy;
    let aligned = (fx - fx.round()).abs() < 1e-6 && (fy - fy.round()).abs() < 1e-6;
    let same_pitch = (window.dx - full.dx).abs() < 1e-9 * full.dx && (window.dy - full.dy).abs() < 1e-9 * full.dy;
    if !aligned || !same_pitch || fx.round() < 0.0 || fy.round() < 0.0 {
        return Err(GridError::SpecMismatch(format!(
            "window {window} is not aligned with raster {full}"
        )));
    }
    let (ix0, iy0) = (fx.round() as usize, fy.round() as usize);
    if ix0 + window.nx > full.nx || iy0 + window.ny > full.ny {
        return Err(GridError::SpecMismatch(format!(
            "window {window} exceeds raster {full}"
        )));
    }
    Ok((ix0, iy0))
}

impl ScalarGrid {
    pub fn crop(&self, window: &GridSpec) -> Result<ScalarGrid> {
        let (ix0, iy0) = crop_offset(&self.spec, window)?;
        let mut out = ScalarGrid::filled(*window, self.unit, 0.0);
        for iy in 0..window.ny {
            for ix in 0..window.nx {
                let src = self.spec.index(ix + ix0, iy + iy0);
                let dst = window.index(ix, iy);
                out.values[dst] = self.values[src];
                out.mask[dst] = self.mask[src];
            }
        }
        Ok(out)
    }
}

/// Either kind of raster, as read back from a grid file.
#[derive(Debug, Clone, PartialEq)]
pub enum Grid {
    Scalar(ScalarGrid),
    Vector(VectorGrid),
}

impl Grid {
    pub fn spec(&self) -> &GridSpec {
        match self {
            Grid::Scalar(g) => &g.spec,
            Grid::Vector(g) => &g.spec,
        }
    }

    pub fn into_scalar(self) -> Option<ScalarGrid> {
        match self {
            Grid::Scalar(g) => Some(g),
            Grid::Vector(_) => None,
        }
    }

    pub fn into_vector(self) -> Option<VectorGrid> {
        match self {
            Grid::Vector(g) => Some(g),
            Grid::Scalar(_) => None,
        }
    }
}

impl From<ScalarGrid> for Grid {
    fn from(g: ScalarGrid) -> Self {
        Grid::Scalar(g)
    }
}

impl From<VectorGrid> for Grid {
    fn from(g: VectorGrid) -> Self {
        Grid::Vector(g)
    }
}

/// Write a grid file. `extra_header` lines are emitted verbatim after a
/// `# ` prefix and ignored on read.
pub fn write_grid(grid: &Grid, path: &Path, extra_header: &[String]) -> Result<()> {
    let file = File::create(path).map_err(|e| GridError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_grid_to(grid, &mut w, extra_header).map_err(|e| GridError::io(path, e))?;
    w.flush().map_err(|e| GridError::io(path, e))
}

pub fn write_grid_to<W: Write>(grid: &Grid, w: &mut W, extra_header: &[String]) -> std::io::Result<()> {
    let spec = grid.spec();
    writeln!(w, "# gridspec {spec}")?;
    match grid {
        Grid::Scalar(g) => {
            writeln!(w, "# kind scalar")?;
            writeln!(w, "# unit {}", g.unit)?;
        }
        Grid::Vector(_) => {
            writeln!(w, "# kind vector")?;
            writeln!(w, "# unit V/cm")?;
        }
    }
    for line in extra_header {
        writeln!(w, "# {line}")?;
    }
    for idx in 0..spec.len() {
        let (ix, iy) = spec.coords(idx);
        match grid {
            Grid::Scalar(g) => {
                write!(w, "{ix},{iy},{}", g.values[idx])?;
                if g.mask[idx] {
                    write!(w, ",m")?;
                }
            }
            Grid::Vector(g) => {
                write!(w, "{ix},{iy},{},{}", g.fx[idx], g.fy[idx])?;
                if g.mask[idx] {
                    write!(w, ",m")?;
                }
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    let file = File::open(path).map_err(|e| GridError::io(path, e))?;
    read_grid_from(BufReader::new(file))
}

pub fn read_grid_from<R: BufRead>(reader: R) -> Result<Grid> {
    let mut spec: Option<GridSpec> = None;
    let mut vector: Option<bool> = None;
    let mut unit: Option<Unit> = None;
    let mut a: Vec<f64> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    let mut mask: Vec<bool> = Vec::new();

    let perr = |line: usize, msg: String| GridError::Parse { line, msg };

    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| perr(lineno, e.to_string()))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut words = rest.split_whitespace();
            match words.next() {
                Some("gridspec") => {
                    let f: Vec<&str> = words.collect();
                    if f.len() != 6 {
                        return Err(perr(lineno, "gridspec needs 6 fields".into()));
                    }
                    let int = |s: &str| s.parse::<usize>().map_err(|e| perr(lineno, e.to_string()));
                    let flt = |s: &str| s.parse::<f64>().map_err(|e| perr(lineno, e.to_string()));
                    let s = GridSpec::new(int(f[0])?, int(f[1])?, flt(f[2])?, flt(f[3])?, flt(f[4])?, flt(f[5])?)
                        .map_err(|e| perr(lineno, e.to_string()))?;
                    spec = Some(s);
                }
                Some("kind") => match words.next() {
                    Some("scalar") => vector = Some(false),
                    Some("vector") => vector = Some(true),
                    other => return Err(perr(lineno, format!("unknown kind {other:?}"))),
                },
                Some("unit") => {
                    let u = words.next().unwrap_or("");
                    unit = Some(u.parse().map_err(|e: String| perr(lineno, e))?);
                }
                _ => {}
            }
            continue;
        }
        let spec = spec.ok_or_else(|| perr(lineno, "data before gridspec header".into()))?;
        let is_vector = vector.ok_or_else(|| perr(lineno, "data before kind header".into()))?;
        let expected = a.len();
        if expected >= spec.len() {
            return Err(perr(lineno, format!("more than nx*ny = {} data rows", spec.len())));
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let nvals = if is_vector { 2 } else { 1 };
        let masked = match fields.len() {
            l if l == 2 + nvals => false,
            l if l == 3 + nvals && fields[2 + nvals] == "m" => true,
            _ => return Err(perr(lineno, format!("malformed row `{line}`"))),
        };
        let ix: usize = fields[0].parse().map_err(|_| perr(lineno, "bad ix".into()))?;
        let iy: usize = fields[1].parse().map_err(|_| perr(lineno, "bad iy".into()))?;
        if spec.coords(expected) != (ix, iy) {
            return Err(perr(
                lineno,
                format!("expected cell {:?}, found ({ix}, {iy})", spec.coords(expected)),
            ));
        }
        let v0: f64 = fields[2]
            .parse()
            .map_err(|_| perr(lineno, format!("bad value `{}`", fields[2])))?;
        let v1: f64 = if is_vector {
            fields[3]
                .parse()
                .map_err(|_| perr(lineno, format!("bad value `{}`", fields[3])))?
        } else {
            0.0
        };
        if !masked && !(v0.is_finite() && v1.is_finite()) {
            return Err(perr(lineno, "non-finite value without mask flag".into()));
        }
        a.push(v0);
        b.push(v1);
        mask.push(masked);
    }

    let spec = spec.ok_or_else(|| perr(0, "missing gridspec header".into()))?;
    if a.len() != spec.len() {
        return Err(perr(0, format!("expected {} data rows, found {}", spec.len(), a.len())));
    }
    if vector == Some(true) {
        Ok(Grid::Vector(VectorGrid {
            spec,
            fx: a,
            fy: b,
            mask,
        }))
    } else {
        Ok(Grid::Scalar(ScalarGrid {
            spec,
            unit: unit.unwrap_or(Unit::Dimensionless),
            values: a,
            mask,
        }))
    }
}

/// Colour scale for heatmaps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scale {
    Auto,
    Fixed { min: f64, max: f64 },
}

const RAMP: [[f64; 3]; 5] = [
    [48.0, 18.0, 59.0],
    [40.0, 100.0, 200.0],
    [30.0, 180.0, 150.0],
    [190.0, 220.0, 60.0],
    [255.0, 250.0, 200.0],
];

/// Piecewise-linear colour ramp; luminance increases monotonically with `t`.
pub fn ramp_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (t.floor() as usize).min(RAMP.len() - 2);
    let f = t - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (RAMP[i][c] + f * (RAMP[i + 1][c] - RAMP[i][c])).round() as u8;
    }
    out
}

/// Pixel buffer for a heatmap. Image row 0 is the top (largest y).
#[derive(Debug, Clone)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Pixmap {
    pub fn pixel(&self, col: usize, row: usize) -> [u8; 3] {
        let o = 3 * (row * self.width + col);
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }

    pub fn set(&mut self, col: usize, row: usize, c: [u8; 3]) {
        if col < self.width && row < self.height {
            let o = 3 * (row * self.width + col);
            self.rgb[o..o + 3].copy_from_slice(&c);
        }
    }

    /// Bresenham line in pixel coordinates.
    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            if x >= 0 && y >= 0 {
                self.set(x as usize, y as usize, c);
            }
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| GridError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let res = (|| {
            write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
            w.write_all(&self.rgb)?;
            w.flush()
        })();
        res.map_err(|e| GridError::io(path, e))
    }
}

/// Rasterise a scalar grid through the colour ramp. Returns the image and
/// the (min, max) actually used.
pub fn heatmap_pixels(g: &ScalarGrid, scale: Scale) -> Result<(Pixmap, f64, f64)> {
    let (min, max) = match scale {
        Scale::Fixed { min, max } => (min, max),
        Scale::Auto => g.range().ok_or(GridError::AllMasked)?,
    };
    if g.count_unmasked() == 0 {
        return Err(GridError::AllMasked);
    }
    let (w, h) = (g.spec.nx, g.spec.ny);
    let mut img = Pixmap {
        width: w,
        height: h,
        rgb: vec![0; 3 * w * h],
    };
    let span = max - min;
    for iy in 0..h {
        for ix in 0..w {
            let idx = g.spec.index(ix, iy);
            if g.mask[idx] {
                continue;
            }
            let t = if span > 0.0 { (g.values[idx] - min) / span } else { 0.5 };
            img.set(ix, h - 1 - iy, ramp_color(t));
        }
    }
    Ok((img, min, max))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".scale.txt");
    PathBuf::from(s)
}

pub fn write_scale_sidecar(path: &Path, min: f64, max: f64, unit: Unit) -> Result<PathBuf> {
    let side = sidecar_path(path);
    std::fs::write(&side, format!("min {min}\nmax {max}\nunit {unit}\n")).map_err(|e| GridError::io(&side, e))?;
    Ok(side)
}

/// Write a P6 heatmap plus `<path>.scale.txt` with the colour-scale bounds.
/// Masked pixels are black.
pub fn render_heatmap(g: &ScalarGrid, path: &Path, scale: Scale) -> Result<()> {
    let (img, min, max) = heatmap_pixels(g, scale)?;
    img.write_ppm(path)?;
    write_scale_sidecar(path, min, max, g.unit)?;
    Ok(())
}

/// Heatmap of |F| with arrows for the in-plane direction every `stride`
/// cells.
pub fn render_vector_overlay(g: &VectorGrid, path: &Path, stride: usize) -> Result<()> {
    let mag = g.magnitude();
    let (mut img, min, max) = heatmap_pixels(&mag, Scale::Auto)?;
    let stride = stride.max(2);
    let fmax = mag.range().map(|r| r.1).unwrap_or(0.0);
    if fmax > 0.0 {
        let len = 0.9 * stride as f64;
        for iy in (stride / 2..g.spec.ny).step_by(stride) {
            for ix in (stride / 2..g.spec.nx).step_by(stride) {
                let idx = g.spec.index(ix, iy);
                if g.mask[idx] {
                    continue;
                }
                let (fx, fy) = (g.fx[idx], g.fy[idx]);
                let norm = fx.hypot(fy);
                if norm == 0.0 {
                    continue;
                }
                let col = ix as i64;
                let row = (g.spec.ny - 1 - iy) as i64;
                let ex = (col as f64 + len * fx / norm).round() as i64;
                let ey = (row as f64 - len * fy / norm).round() as i64;
                img.line((col, row), (ex, ey), [255, 255, 255]);
                img.set(col as usize, row as usize, [255, 0, 0]);
            }
        }
    }
    img.write_ppm(path)?;
    write_scale_sidecar(path, min, max, mag.unit)?;
    Ok(())
}

/// Point-in-polygon (even-odd rule); vertices in µm.
pub fn polygon_contains(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Mask that is `true` (excluded) for cells outside the polygon.
pub fn polygon_mask(spec: &GridSpec, poly: &[(f64, f64)]) -> Vec<bool> {
    (0..spec.len())
        .map(|i| {
            let (ix, iy) = spec.coords(i);
            !polygon_contains(poly, spec.x(ix), spec.y(iy))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(nx: usize, ny: usize) -> GridSpec {
        GridSpec::new(nx, ny, 23.0, 23.0, -100.0, 200.0).unwrap()
    }

    fn roundtrip(g: &Grid) -> Grid {
        let mut buf = Vec::new();
        write_grid_to(g, &mut buf, &["config_hash abc".into()]).unwrap();
        read_grid_from(buf.as_slice()).unwrap()
    }

    #[test]
    fn zeros_roundtrip() {
        let g = Grid::Scalar(ScalarGrid::filled(spec(2, 2), Unit::MHz, 0.0));
        assert_eq!(roundtrip(&g), g);
    }

    #[test]
    fn row_count_mismatch_is_parse_error() {
        // header claims 3x3 = 9 cells, only 8 rows follow
        let mut text = String::from("# gridspec 3 3 1 1 0 0\n# kind scalar\n# unit MHz\n");
        for i in 0..8 {
            text.push_str(&format!("{},{},0\n", i % 3, i / 3));
        }
        let err = read_grid_from(text.as_bytes()).unwrap_err();
        assert!(matches!(err, GridError::Parse { .. }), "{err}");
    }

    #[test]
    fn extra_rows_report_line_number() {
        let mut text = String::from("# gridspec 2 2 1 1 0 0\n# kind scalar\n");
        for i in 0..5 {
            text.push_str(&format!("{},{},0\n", i % 2, i / 2));
        }
        match read_grid_from(text.as_bytes()) {
            Err(GridError::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_without_mask_rejected() {
        let text = "# gridspec 2 2 1 1 0 0\n# kind scalar\n0,0,NaN\n1,0,0\n0,1,0\n1,1,0\n";
        match read_grid_from(text.as_bytes()) {
            Err(GridError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let ok = "# gridspec 2 2 1 1 0 0\n# kind scalar\n0,0,NaN,m\n1,0,0\n0,1,0\n1,1,0\n";
        let g = read_grid_from(ok.as_bytes()).unwrap().into_scalar().unwrap();
        assert!(g.mask[0]);
    }

    #[test]
    fn bad_header_rejected() {
        let text = "# gridspec 2 2 1\n# kind scalar\n";
        assert!(matches!(
            read_grid_from(text.as_bytes()),
            Err(GridError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn magnitude_of_zero_field_is_zero() {
        let v = VectorGrid::zeros(spec(4, 3));
        assert!(v.magnitude().values.iter().all(|m| *m == 0.0));
    }

    #[test]
    fn window_and_crop_align() {
        let full = GridSpec::new(11, 11, 10.0, 10.0, -50.0, 0.0).unwrap();
        let (w, ix0, iy0) = full.window(-20.0, 20.0, 30.0, 60.0).unwrap();
        assert_eq!((w.nx, w.ny, ix0, iy0), (5, 4, 3, 3));
        let g = ScalarGrid::from_fn(full, Unit::Volt, |x, y| x + 100.0 * y);
        let c = g.crop(&w).unwrap();
        assert_eq!(c.get(0, 0), -20.0 + 3000.0);
        assert_eq!(c.get(4, 3), 20.0 + 6000.0);
    }

    #[test]
    fn resample_is_exact_for_bilinear_fields() {
        let full = GridSpec::new(11, 11, 10.0, 10.0, -50.0, 0.0).unwrap();
        let n = full.len();
        let mut g = VectorGrid::zeros(full);
        for i in 0..n {
            let (ix, iy) = full.coords(i);
            let (x, y) = (full.x(ix), full.y(iy));
            g.fx[i] = 2.0 * x - y + 0.01 * x * y;
            g.fy[i] = 3.0;
        }
        let target = GridSpec::new(4, 3, 23.0, 23.0, -41.0, 7.0).unwrap();
        let r = g.resample(&target).unwrap();
        for iy in 0..target.ny {
            for ix in 0..target.nx {
                let (x, y) = (target.x(ix), target.y(iy));
                let i = target.index(ix, iy);
                assert!((r.fx[i] - (2.0 * x - y + 0.01 * x * y)).abs() < 1e-9);
                assert!((r.fy[i] - 3.0).abs() < 1e-12);
            }
        }
        let aligned = GridSpec::new(3, 3, 10.0, 10.0, -20.0, 30.0).unwrap();
        assert_eq!(g.resample(&aligned).unwrap(), g.crop(&aligned).unwrap());
        let outside = GridSpec::new(3, 3, 23.0, 23.0, 20.0, 0.0).unwrap();
        assert!(g.resample(&outside).is_err());
    }

    #[test]
    fn binning_k1_is_identity_and_k2_averages() {
        let s = spec(4, 4);
        let g = ScalarGrid::from_fn(s, Unit::MHz, |x, y| x * 0.5 + y);
        assert_eq!(g.binned(1).unwrap(), g);
        let b = g.binned(2).unwrap();
        assert_eq!((b.spec.nx, b.spec.ny), (2, 2));
        let expect = (g.get(0, 0) + g.get(1, 0) + g.get(0, 1) + g.get(1, 1)) / 4.0;
        assert!((b.get(0, 0) - expect).abs() < 1e-12);
        assert!((b.spec.x0 - (s.x0 + 11.5)).abs() < 1e-12);
    }

    #[test]
    fn polygon_membership() {
        let square = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)];
        assert!(polygon_contains(&square, 5.0, 5.0));
        assert!(!polygon_contains(&square, 15.0, 5.0));
    }

    #[test]
    fn constant_grid_renders_uniform() {
        let g = ScalarGrid::filled(spec(5, 4), Unit::VoltPerCm, 0.3);
        let (img, _, _) = heatmap_pixels(&g, Scale::Auto).unwrap();
        let first = img.pixel(0, 0);
        for r in 0..img.height {
            for c in 0..img.width {
                assert_eq!(img.pixel(c, r), first);
            }
        }
    }

    #[test]
    fn brightest_pixel_at_maximum() {
        let s = spec(6, 5);
        let mut g = ScalarGrid::filled(s, Unit::VoltPerCm, 0.1);
        let hot = s.index(4, 1);
        g.values[hot] = 1.0;
        g.values[s.index(0, 0)] = 0.0;
        g.mask[s.index(2, 2)] = true;
        let (img, _, _) = heatmap_pixels(&g, Scale::Auto).unwrap();
        let lum = |p: [u8; 3]| p.iter().map(|c| *c as u32).sum::<u32>();
        let mut best = (0, 0, 0);
        for r in 0..img.height {
            for c in 0..img.width {
                let l = lum(img.pixel(c, r));
                if l > best.0 {
                    best = (l, c, r);
                }
            }
        }
        assert_eq!((best.1, best.2), (4, s.ny - 1 - 1));
        assert_eq!(img.pixel(2, s.ny - 1 - 2), [0, 0, 0]);
    }

    #[test]
    fn auto_scale_sidecar_records_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ppm");
        let s = GridSpec::new(3, 3, 10.0, 10.0, -10.0, 0.0).unwrap();
        let g = ScalarGrid::from_fn(s, Unit::VoltPerCm, |x, _| if x > 0.0 { 0.2 } else { 0.0 });
        render_heatmap(&g, &path, Scale::Auto).unwrap();
        let side = std::fs::read_to_string(dir.path().join("f.ppm.scale.txt")).unwrap();
        assert!(side.contains("min 0\n"), "{side}");
        assert!(side.contains("max 0.2\n"), "{side}");
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n3 3\n255\n"));
        assert_eq!(bytes.len(), "P6\n3 3\n255\n".len() + 27);
    }

    #[test]
    fn all_masked_heatmap_is_error() {
        let mut g = ScalarGrid::filled(spec(2, 2), Unit::MHz, 1.0);
        g.mask.iter_mut().for_each(|m| *m = true);
        assert!(matches!(heatmap_pixels(&g, Scale::Auto), Err(GridError::AllMasked)));
    }

    fn arb_grid() -> impl Strategy<Value = Grid> {
        (2usize..7, 2usize..7, any::<bool>()).prop_flat_map(|(nx, ny, vector)| {
            let n = nx * ny;
            (
                prop::collection::vec(-1e6f64..1e6, n),
                prop::collection::vec(-1e3f64..1e3, n),
                prop::collection::vec(prop::bool::weighted(0.2), n),
            )
                .prop_map(move |(a, b, mask)| {
                    let s = GridSpec::new(nx, ny, 23.0, 11.5, -57.5, 3.0).unwrap();
                    if vector {
                        Grid::Vector(VectorGrid {
                            spec: s,
                            fx: a,
                            fy: b,
                            mask,
                        })
                    } else {
                        Grid::Scalar(ScalarGrid {
                            spec: s,
                            unit: Unit::MHz,
                            values: a,
                            mask,
                        })
                    }
                })
        })
    }

    proptest! {
        #[test]
        fn write_read_roundtrip(g in arb_grid()) {
            prop_assert_eq!(roundtrip(&g), g);
        }

        #[test]
        fn magnitude_nonnegative(fx in prop::collection::vec(-5.0f64..5.0, 4), fy in prop::collection::vec(-5.0f64..5.0, 4)) {
            let v = VectorGrid::from_components(spec(2, 2), fx, fy).unwrap();
            prop_assert!(v.magnitude().values.iter().all(|m| *m >= 0.0));
        }
    }
}
