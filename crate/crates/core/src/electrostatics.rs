//! Finite-difference electrostatics of the chip cross-section.
//!
//! The solution domain is the interior of the shield box: `x ∈ [-W/2, W/2]`,
//! `y ∈ [0, H]`. The chip surface is the `y = 0` node row. Superconducting
//! electrodes are Dirichlet nodes on that row; the CPW gaps are free nodes
//! with a mirror condition that carries the gap surface charge `σ_g` as a
//! flux source. Only `gap_flux_fraction` of that flux enters the vacuum; the
//! rest is taken up by the substrate, which is not modelled otherwise. The
//! surface charge `σ_s` sits
//! on an insulating layer of thickness `layer_thickness` atop every
//! superconductor, which raises the electrode surface potential by
//! `σ_s·t/ε₀`. The shield is Dirichlet on the side and top walls.

use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::{self, Grid, GridError, GridSpec, ScalarGrid, Unit, VectorGrid};
use crate::stark::EPSILON_0;

/// Charge density used for the unit charge solves, C/m². Keeps potentials
/// near the volt scale so the absolute solver tolerance stays meaningful.
const CHARGE_UNIT: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid solver settings: {0}")]
    Settings(String),
    #[error("SOR did not converge in {iterations} iterations (residual {residual:.3e} V)")]
    NotConverged {
        iterations: usize,
        residual: f64,
        /// Max residual sampled every 100 sweeps.
        history: Vec<f64>,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("basis cache: {0}")]
    Cache(String),
}

pub type Result<T> = std::result::Result<T, SolveError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Electrode {
    Center,
    LeftGround,
    RightGround,
    Shield,
}

impl Electrode {
    pub const ALL: [Electrode; 4] = [
        Electrode::Center,
        Electrode::LeftGround,
        Electrode::RightGround,
        Electrode::Shield,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Electrode::Center => "center",
            Electrode::LeftGround => "left",
            Electrode::RightGround => "right",
            Electrode::Shield => "shield",
        }
    }

    fn is_superconductor(&self) -> bool {
        !matches!(self, Electrode::Shield)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChargeSpecies {
    /// Charges in the two CPW gaps.
    Gap,
    /// Charges on the insulating layer over the superconductor.
    Surface,
}

impl ChargeSpecies {
    pub const ALL: [ChargeSpecies; 2] = [ChargeSpecies::Gap, ChargeSpecies::Surface];

    pub fn name(&self) -> &'static str {
        match self {
            ChargeSpecies::Gap => "sigma_g",
            ChargeSpecies::Surface => "sigma_s",
        }
    }
}

/// CPW cross-section. Lengths in µm.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceGeometry {
    pub center_width: f64,
    pub gap_width: f64,
    /// Width of each ground plane; `None` extends it to the shield wall.
    pub ground_extent: Option<f64>,
    pub shield_width: f64,
    pub shield_height: f64,
    /// Thickness of the insulating layer carrying `σ_s`.
    pub layer_thickness: f64,
    /// Share of the gap-charge flux that leaves the chip into the vacuum.
    pub gap_flux_fraction: f64,
}

impl Default for DeviceGeometry {
    fn default() -> Self {
        DeviceGeometry {
            center_width: 180.0,
            gap_width: 80.0,
            ground_extent: None,
            shield_width: 6000.0,
            shield_height: 4000.0,
            layer_thickness: 0.3631,
            gap_flux_fraction: 0.0781,
        }
    }
}

/// What occupies a node of the solver raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Electrode(Electrode),
    /// Chip-surface node inside a CPW gap.
    Gap,
    /// Chip-surface node beyond a finite ground plane.
    BareChip,
    Vacuum,
}

impl DeviceGeometry {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SolveError::Geometry(m.into()));
        if !(self.center_width >= 0.0 && self.gap_width >= 0.0) {
            return bad("widths must be non-negative");
        }
        if !(self.shield_width > 0.0 && self.shield_height > 0.0) {
            return bad("shield box must have positive size");
        }
        if !(self.layer_thickness >= 0.0) {
            return bad("layer thickness must be non-negative");
        }
        if !(self.gap_flux_fraction > 0.0 && self.gap_flux_fraction <= 1.0) {
            return bad("gap flux fraction must lie in (0, 1]");
        }
        if let Some(g) = self.ground_extent {
            if !(g >= 0.0) {
                return bad("ground extent must be non-negative");
            }
        }
        if self.center_width / 2.0 + self.gap_width + self.ground_extent.unwrap_or(0.0) > self.shield_width / 2.0 {
            return bad("CPW does not fit inside the shield");
        }
        Ok(())
    }

    /// Node raster covering the shield interior at the given pitch.
    pub fn domain_spec(&self, dx: f64, dy: f64) -> Result<GridSpec> {
        let cells = |len: f64, d: f64| -> Result<usize> {
            let n = len / d;
            if (n - n.round()).abs() > 1e-6 {
                return Err(SolveError::Settings(format!(
                    "shield dimension {len} µm is not a multiple of the grid pitch {d} µm"
                )));
            }
            Ok(n.round() as usize)
        };
        let nx = cells(self.shield_width, dx)? + 1;
        let ny = cells(self.shield_height, dy)? + 1;
        Ok(GridSpec::new(nx, ny, dx, dy, -self.shield_width / 2.0, 0.0)?)
    }

    /// Whether every electrode edge falls on a node of pitch `dx` from the
    /// shield wall.
    pub fn edges_on_raster(&self, dx: f64) -> bool {
        let half_c = self.center_width / 2.0;
        let gap_end = half_c + self.gap_width;
        let mut edges = vec![half_c, gap_end];
        if let Some(g) = self.ground_extent {
            edges.push(gap_end + g);
        }
        edges.iter().all(|e| {
            let n = (e + self.shield_width / 2.0) / dx;
            (n - n.round()).abs() < 1e-6
        })
    }

    /// Stencil arms `(left, right)` of a gap node at `x`, shortened to
    /// reach an electrode edge that lies within one pitch, so the gap
    /// keeps its true width off the raster.
    pub fn gap_arms(&self, x: f64, dx: f64) -> (f64, f64) {
        let half_c = self.center_width / 2.0;
        let gap_end = half_c + self.gap_width;
        let (inner, outer) = (x.abs() - half_c, gap_end - x.abs());
        let (l, r) = if x < 0.0 { (outer, inner) } else { (inner, outer) };
        (l.min(dx), r.min(dx))
    }

    /// Classify every solver node.
    pub fn classify(&self, spec: &GridSpec) -> Vec<NodeKind> {
        let eps = 1e-6 * spec.dx;
        let half_c = self.center_width / 2.0;
        let gap_end = half_c + self.gap_width;
        let ground_end = self.ground_extent.map(|g| gap_end + g).unwrap_or(f64::INFINITY);
        let mut kinds = Vec::with_capacity(spec.len());
        for iy in 0..spec.ny {
            for ix in 0..spec.nx {
                let x = spec.x(ix);
                let side_wall = ix == 0 || ix == spec.nx - 1;
                let kind = if iy == spec.ny - 1 {
                    NodeKind::Electrode(Electrode::Shield)
                } else if iy == 0 {
                    let ax = x.abs();
                    if ax <= half_c + eps {
                        NodeKind::Electrode(Electrode::Center)
                    } else if ax < gap_end - eps {
                        NodeKind::Gap
                    } else if ax <= ground_end + eps {
                        if x < 0.0 {
                            NodeKind::Electrode(Electrode::LeftGround)
                        } else {
                            NodeKind::Electrode(Electrode::RightGround)
                        }
                    } else if side_wall {
                        NodeKind::Electrode(Electrode::Shield)
                    } else {
                        NodeKind::BareChip
                    }
                } else if side_wall {
                    NodeKind::Electrode(Electrode::Shield)
                } else {
                    NodeKind::Vacuum
                };
                kinds.push(kind);
            }
        }
        kinds
    }

    pub fn canonical(&self) -> String {
        format!(
            "center_width={} gap_width={} ground_extent={:?} shield_width={} shield_height={} layer_thickness={} gap_flux_fraction={}",
            self.center_width,
            self.gap_width,
            self.ground_extent,
            self.shield_width,
            self.shield_height,
            self.layer_thickness,
            self.gap_flux_fraction
        )
    }
}

/// Electrode potentials of one configuration, volts.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialSet {
    pub label: String,
    pub v_c: f64,
    pub v_l: f64,
    pub v_r: f64,
    pub v_s: f64,
}

impl PotentialSet {
    pub fn new(label: impl Into<String>, v_c: f64, v_l: f64, v_r: f64, v_s: f64) -> Self {
        PotentialSet {
            label: label.into(),
            v_c,
            v_l,
            v_r,
            v_s,
        }
    }

    pub fn zero(label: impl Into<String>) -> Self {
        Self::new(label, 0.0, 0.0, 0.0, 0.0)
    }

    pub fn get(&self, e: Electrode) -> f64 {
        match e {
            Electrode::Center => self.v_c,
            Electrode::LeftGround => self.v_l,
            Electrode::RightGround => self.v_r,
            Electrode::Shield => self.v_s,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.v_c, self.v_l, self.v_r, self.v_s]
    }

    pub fn from_array(label: impl Into<String>, v: [f64; 4]) -> Self {
        Self::new(label, v[0], v[1], v[2], v[3])
    }
}

impl fmt::Display for PotentialSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: V_c={} V_l={} V_r={} V_s={}",
            self.label, self.v_c, self.v_l, self.v_r, self.v_s
        )
    }
}

/// Surface charge densities, C/m².
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ChargeDensities {
    pub sigma_g: f64,
    pub sigma_s: f64,
}

impl ChargeDensities {
    pub fn get(&self, s: ChargeSpecies) -> f64 {
        match s {
            ChargeSpecies::Gap => self.sigma_g,
            ChargeSpecies::Surface => self.sigma_s,
        }
    }
}

/// SOR relaxation factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Relaxation {
    /// Fixed factor in (0, 2).
    Fixed(f64),
    /// The optimum for the raster's Jacobi spectral radius, so iteration
    /// counts grow with the raster width instead of its square.
    Optimal,
}

impl Relaxation {
    /// Factor to use on `spec`, whose bottom row is a mirror boundary.
    pub fn factor(&self, spec: &GridSpec) -> f64 {
        match *self {
            Relaxation::Fixed(w) => w,
            Relaxation::Optimal => {
                let (ax, ay) = (1.0 / (spec.dx * spec.dx), 1.0 / (spec.dy * spec.dy));
                let cx = (std::f64::consts::PI / (spec.nx - 1) as f64).cos();
                // the mirror doubles the effective height
                let cy = (std::f64::consts::PI / (2 * (spec.ny - 1)) as f64).cos();
                let rho = (ax * cx + ay * cy) / (ax + ay);
                2.0 / (1.0 + (1.0 - rho * rho).sqrt())
            }
        }
    }
}

impl fmt::Display for Relaxation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Relaxation::Fixed(w) => write!(f, "{w}"),
            Relaxation::Optimal => f.write_str("optimal"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Grid pitch, µm.
    pub dx: f64,
    pub dy: f64,
    pub omega: Relaxation,
    /// Convergence threshold on the max nodal residual, V.
    pub tol: f64,
    pub max_iter: usize,
    /// Combine solves at the pitch and at half of it as `2·F(h/2) − F(h)`,
    /// cancelling the first-order error from the gap edges.
    pub extrapolate: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            dx: 10.0,
            dy: 10.0,
            omega: Relaxation::Fixed(1.9),
            tol: 1e-8,
            max_iter: 200_000,
            extrapolate: true,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if let Relaxation::Fixed(w) = self.omega {
            if !(w > 0.0 && w < 2.0) {
                return Err(SolveError::Settings(format!("omega {w} outside (0, 2)")));
            }
        }
        if !(self.tol > 0.0) {
            return Err(SolveError::Settings("tol must be positive".into()));
        }
        if !(self.dx > 0.0 && self.dy > 0.0) {
            return Err(SolveError::Settings("grid pitch must be positive".into()));
        }
        Ok(())
    }

    pub fn canonical(&self) -> String {
        format!(
            "dx={} dy={} omega={} tol={} max_iter={} extrapolate={}",
            self.dx, self.dy, self.omega, self.tol, self.max_iter, self.extrapolate
        )
    }
}

/// Discrete Poisson problem on a node raster.
///
/// Nodes with a value in `fixed` are Dirichlet. Free nodes on the bottom
/// row use a mirror condition; every other free node must be interior.
/// `sheet` holds a surface charge density (C/m²) per node: in the interior
/// it acts as a one-row sheet `σ/(ε₀·dy)`, on the bottom row it is the
/// outward flux `∂φ/∂y = -σ/ε₀`.
///
/// `arms` optionally shortens the horizontal stencil arms (µm, left and
/// right) of a free node whose Dirichlet neighbour stands in for a
/// boundary that actually lies closer than one pitch.
#[derive(Debug, Clone)]
pub struct PoissonProblem {
    pub spec: GridSpec,
    pub fixed: Vec<Option<f64>>,
    pub sheet: Vec<f64>,
    pub arms: Vec<Option<(f64, f64)>>,
}

#[derive(Debug, Clone)]
pub struct PotentialSolution {
    pub potential: ScalarGrid,
    pub iterations: usize,
    pub residual: f64,
}

impl PoissonProblem {
    pub fn new(spec: GridSpec) -> Self {
        PoissonProblem {
            spec,
            fixed: vec![None; spec.len()],
            sheet: vec![0.0; spec.len()],
            arms: vec![None; spec.len()],
        }
    }

    fn check(&self) -> Result<()> {
        let s = &self.spec;
        for iy in 0..s.ny {
            for ix in 0..s.nx {
                let i = s.index(ix, iy);
                let edge = ix == 0 || ix == s.nx - 1 || iy == s.ny - 1;
                if edge && self.fixed[i].is_none() {
                    return Err(SolveError::Geometry(format!(
                        "boundary node ({ix}, {iy}) has no Dirichlet value"
                    )));
                }
                if let Some((l, r)) = self.arms[i] {
                    if !(l > 0.0 && l <= s.dx && r > 0.0 && r <= s.dx) {
                        return Err(SolveError::Geometry(format!(
                            "stencil arms ({l}, {r}) at node ({ix}, {iy}) outside (0, dx]"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// `σ/ε₀` converted to V/µm, divided by `dy` → V/µm².
    fn source(&self, i: usize) -> f64 {
        let s = self.sheet[i];
        if s == 0.0 {
            return 0.0;
        }
        let (_, iy) = self.spec.coords(i);
        let per_um = s / EPSILON_0 * 1e-6;
        if iy == 0 {
            2.0 * per_um / self.spec.dy
        } else {
            per_um / self.spec.dy
        }
    }

    /// Gauss–Seidel target value of free node `i` given current `phi`.
    #[inline]
    fn target(&self, phi: &[f64], i: usize, iy: usize, ax: f64, ay: f64, src: f64) -> f64 {
        let nx = self.spec.nx;
        let vert = if iy == 0 {
            2.0 * ay * phi[i + nx]
        } else {
            ay * (phi[i - nx] + phi[i + nx])
        };
        match self.arms[i] {
            None => (ax * (phi[i - 1] + phi[i + 1]) + vert + src) / (2.0 * ax + 2.0 * ay),
            Some((l, r)) => {
                // Shortley–Weller second difference
                let cl = 2.0 / (l * (l + r));
                let cr = 2.0 / (r * (l + r));
                (cl * phi[i - 1] + cr * phi[i + 1] + vert + src) / (cl + cr + 2.0 * ay)
            }
        }
    }

    /// Max |GS target − φ| over free nodes, V.
    pub fn residual(&self, phi: &[f64]) -> f64 {
        let s = &self.spec;
        let ax = 1.0 / (s.dx * s.dx);
        let ay = 1.0 / (s.dy * s.dy);
        let mut worst = 0.0f64;
        for iy in 0..s.ny {
            for ix in 0..s.nx {
                let i = s.index(ix, iy);
                if self.fixed[i].is_some() {
                    continue;
                }
                let t = self.target(phi, i, iy, ax, ay, self.source(i));
                worst = worst.max((t - phi[i]).abs());
            }
        }
        worst
    }

    /// Red-black successive over-relaxation from zero.
    pub fn solve(&self, omega: f64, tol: f64, max_iter: usize) -> Result<PotentialSolution> {
        self.solve_from(None, omega, tol, max_iter)
    }

    /// Successive over-relaxation starting from `initial` on the free nodes.
    pub fn solve_from(
        &self,
        initial: Option<&[f64]>,
        omega: f64,
        tol: f64,
        max_iter: usize,
    ) -> Result<PotentialSolution> {
        self.check()?;
        let s = self.spec;
        if initial.is_some_and(|v| v.len() != s.len()) {
            return Err(SolveError::Settings("initial guess does not match the raster".into()));
        }
        let ax = 1.0 / (s.dx * s.dx);
        let ay = 1.0 / (s.dy * s.dy);
        let mut phi: Vec<f64> = self
            .fixed
            .iter()
            .enumerate()
            .map(|(i, v)| v.unwrap_or_else(|| initial.map_or(0.0, |g| g[i])))
            .collect();
        let nx = s.nx;
        let src: Vec<f64> = (0..s.len()).map(|i| self.source(i)).collect();
        // Red-black ordering: all nodes with even `ix + iy` first, then the
        // odd ones. Rows whose inner nodes are all plain free nodes take a
        // tight loop; the others visit their free nodes one by one.
        let plain = |iy: usize| {
            iy > 0
                && iy + 1 < s.ny
                && (1..nx - 1).all(|ix| {
                    let i = s.index(ix, iy);
                    self.fixed[i].is_none() && self.arms[i].is_none()
                })
        };
        let rows: Vec<Option<[Vec<usize>; 2]>> = (0..s.ny)
            .map(|iy| {
                if plain(iy) {
                    return None;
                }
                let color = |c: usize| -> Vec<usize> {
                    (0..nx)
                        .filter(|ix| (ix + iy) % 2 == c)
                        .map(|ix| s.index(ix, iy))
                        .filter(|&i| self.fixed[i].is_none())
                        .collect()
                };
                Some([color(0), color(1)])
            })
            .collect();
        let inv = 1.0 / (2.0 * ax + 2.0 * ay);
        let mut history = Vec::new();
        let mut last = f64::INFINITY;
        for it in 1..=max_iter {
            // the largest update is tracked on every tenth sweep only
            let check = it % 10 == 0 || it == max_iter;
            let mut worst = 0.0f64;
            for c in 0..2 {
                for (iy, row) in rows.iter().enumerate() {
                    match row {
                        Some(nodes) => {
                            for &i in &nodes[c] {
                                let r = self.target(&phi, i, iy, ax, ay, src[i]) - phi[i];
                                worst = worst.max(r.abs());
                                phi[i] += omega * r;
                            }
                        }
                        None => {
                            let base = iy * nx;
                            let (before, rest) = phi.split_at_mut(base);
                            let (cur, after) = rest.split_at_mut(nx);
                            let up = &before[base - nx..];
                            let down = &after[..nx];
                            let srow = &src[base..base + nx];
                            let mut ix = if (1 + iy) % 2 == c { 1 } else { 2 };
                            if check {
                                while ix < nx - 1 {
                                    let t =
                                        (ax * (cur[ix - 1] + cur[ix + 1]) + ay * (up[ix] + down[ix]) + srow[ix]) * inv;
                                    let r = t - cur[ix];
                                    worst = worst.max(r.abs());
                                    cur[ix] += omega * r;
                                    ix += 2;
                                }
                            } else {
                                while ix < nx - 1 {
                                    let t =
                                        (ax * (cur[ix - 1] + cur[ix + 1]) + ay * (up[ix] + down[ix]) + srow[ix]) * inv;
                                    cur[ix] += omega * (t - cur[ix]);
                                    ix += 2;
                                }
                            }
                        }
                    }
                }
            }
            if !check {
                continue;
            }
            last = worst;
            if it % 100 == 0 {
                history.push(worst);
            }
            if worst < tol {
                let res = self.residual(&phi);
                if res < tol {
                    return Ok(PotentialSolution {
                        potential: ScalarGrid {
                            spec: s,
                            unit: Unit::Volt,
                            values: phi,
                            mask: vec![false; s.len()],
                        },
                        iterations: it,
                        residual: res,
                    });
                }
            }
        }
        history.push(last);
        Err(SolveError::NotConverged {
            iterations: max_iter,
            residual: last,
            history,
        })
    }
}

/// Build the discrete problem for a device configuration.
pub fn device_problem(
    geom: &DeviceGeometry,
    pots: &PotentialSet,
    q: &ChargeDensities,
    settings: &SolverSettings,
) -> Result<PoissonProblem> {
    geom.validate()?;
    settings.validate()?;
    let spec = geom.domain_spec(settings.dx, settings.dy)?;
    let kinds = geom.classify(&spec);
    let layer_offset = q.sigma_s * geom.layer_thickness * 1e-6 / EPSILON_0;
    let mut p = PoissonProblem::new(spec);
    for (i, kind) in kinds.iter().enumerate() {
        match kind {
            NodeKind::Electrode(e) => {
                let mut v = pots.get(*e);
                if e.is_superconductor() {
                    v += layer_offset;
                }
                p.fixed[i] = Some(v);
            }
            NodeKind::Gap => {
                p.sheet[i] = q.sigma_g * geom.gap_flux_fraction;
                let (l, r) = geom.gap_arms(spec.x(spec.coords(i).0), spec.dx);
                if l < spec.dx || r < spec.dx {
                    p.arms[i] = Some((l, r));
                }
            }
            NodeKind::BareChip | NodeKind::Vacuum => {}
        }
    }
    Ok(p)
}

/// Solve for the potential (V) over the whole shield interior.
pub fn solve_potential(
    geom: &DeviceGeometry,
    pots: &PotentialSet,
    q: &ChargeDensities,
    settings: &SolverSettings,
) -> Result<PotentialSolution> {
    let p = device_problem(geom, pots, q, settings)?;
    p.solve(settings.omega.factor(&p.spec), settings.tol, settings.max_iter)
}

/// `E = -∇φ` in V/cm: central differences inside, second-order one-sided
/// differences on the boundary.
pub fn field_from_potential(phi: &ScalarGrid) -> VectorGrid {
    let s = phi.spec;
    let mut out = VectorGrid::zeros(s);
    // V/µm -> V/cm
    let to_cm = 1e4;
    let deriv = |get: &dyn Fn(usize) -> f64, k: usize, n: usize, h: f64| -> f64 {
        if k > 0 && k + 1 < n {
            (get(k + 1) - get(k - 1)) / (2.0 * h)
        } else if n >= 3 && k == 0 {
            (-3.0 * get(0) + 4.0 * get(1) - get(2)) / (2.0 * h)
        } else if n >= 3 {
            (3.0 * get(n - 1) - 4.0 * get(n - 2) + get(n - 3)) / (2.0 * h)
        } else if k == 0 {
            (get(1) - get(0)) / h
        } else {
            (get(k) - get(k - 1)) / h
        }
    };
    for iy in 0..s.ny {
        for ix in 0..s.nx {
            let i = s.index(ix, iy);
            let gx = deriv(&|k| phi.values[s.index(k, iy)], ix, s.nx, s.dx);
            let gy = deriv(&|k| phi.values[s.index(ix, k)], iy, s.ny, s.dy);
            out.fx[i] = -gx * to_cm;
            out.fy[i] = -gy * to_cm;
            out.mask[i] = phi.mask[i];
        }
    }
    out
}

/// Solve and return the field interpolated onto `window`, V/cm. With
/// `settings.extrapolate` the result is `2·F(h/2) − F(h)`; the fine solve
/// starts from the coarse potential.
pub fn solve_field(
    geom: &DeviceGeometry,
    pots: &PotentialSet,
    q: &ChargeDensities,
    settings: &SolverSettings,
    window: &GridSpec,
) -> Result<VectorGrid> {
    if settings.extrapolate && !geom.edges_on_raster(settings.dx) {
        return Err(SolveError::Settings(format!(
            "extrapolation needs the electrode edges on the {} µm raster",
            settings.dx
        )));
    }
    let coarse = solve_potential(geom, pots, q, settings)?;
    let coarse_field = field_from_potential(&coarse.potential).resample(window)?;
    if !settings.extrapolate {
        return Ok(coarse_field);
    }
    let half = SolverSettings {
        dx: settings.dx / 2.0,
        dy: settings.dy / 2.0,
        ..*settings
    };
    let problem = device_problem(geom, pots, q, &half)?;
    let guess = prolong(&coarse.potential, &problem.spec);
    let omega = half.omega.factor(&problem.spec);
    let fine = problem.solve_from(Some(&guess), omega, half.tol, half.max_iter)?;
    let mut out = field_from_potential(&fine.potential).resample(window)?.scaled(2.0);
    out.add_scaled(&coarse_field, -1.0)?;
    Ok(out)
}

/// Bilinear transfer of a potential onto the raster of half its pitch.
fn prolong(coarse: &ScalarGrid, fine: &GridSpec) -> Vec<f64> {
    let c = coarse.spec;
    let mut out = vec![0.0; fine.len()];
    for iy in 0..fine.ny {
        for ix in 0..fine.nx {
            let (cx, cy) = (ix / 2, iy / 2);
            let (nx, ny) = ((cx + ix % 2).min(c.nx - 1), (cy + iy % 2).min(c.ny - 1));
            let v = |x: usize, y: usize| coarse.values[c.index(x, y)];
            out[fine.index(ix, iy)] = 0.25 * (v(cx, cy) + v(nx, cy) + v(cx, ny) + v(nx, ny));
        }
    }
    out
}

/// Unit-response fields for superposition on an analysis window.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisFields {
    pub spec: GridSpec,
    pub geometry_hash: String,
    /// Response to 1 V on one electrode, V/cm per V, in [`Electrode::ALL`] order.
    pub electrodes: [VectorGrid; 4],
    /// Response to 1 C/m² of one species, V/cm per (C/m²), in
    /// [`ChargeSpecies::ALL`] order.
    pub charges: [VectorGrid; 2],
}

/// Bumped whenever the discretisation changes, so stale caches miss.
const STENCIL_REVISION: &str = "stencil=1";

/// Hash identifying a basis: discretisation, geometry, solver settings and window.
pub fn geometry_hash(geom: &DeviceGeometry, settings: &SolverSettings, window: &GridSpec) -> String {
    let mut h = Sha256::new();
    h.update(STENCIL_REVISION.as_bytes());
    h.update(b"\n");
    h.update(geom.canonical().as_bytes());
    h.update(b"\n");
    h.update(settings.canonical().as_bytes());
    h.update(b"\n");
    h.update(format!("window={window}").as_bytes());
    hex::encode(h.finalize())
}

enum UnitCase {
    Electrode(Electrode),
    Charge(ChargeSpecies),
}

/// One solve per electrode and per charge species, run in parallel.
pub fn compute_basis(geom: &DeviceGeometry, settings: &SolverSettings, window: &GridSpec) -> Result<BasisFields> {
    let cases: Vec<UnitCase> = Electrode::ALL
        .iter()
        .map(|e| UnitCase::Electrode(*e))
        .chain(ChargeSpecies::ALL.iter().map(|c| UnitCase::Charge(*c)))
        .collect();
    let fields: Vec<VectorGrid> = cases
        .par_iter()
        .map(|case| -> Result<VectorGrid> {
            let mut pots = PotentialSet::zero("unit");
            let mut q = ChargeDensities::default();
            let scale = match case {
                UnitCase::Electrode(e) => {
                    match e {
                        Electrode::Center => pots.v_c = 1.0,
                        Electrode::LeftGround => pots.v_l = 1.0,
                        Electrode::RightGround => pots.v_r = 1.0,
                        Electrode::Shield => pots.v_s = 1.0,
                    }
                    1.0
                }
                UnitCase::Charge(c) => {
                    match c {
                        ChargeSpecies::Gap => q.sigma_g = CHARGE_UNIT,
                        ChargeSpecies::Surface => q.sigma_s = CHARGE_UNIT,
                    }
                    1.0 / CHARGE_UNIT
                }
            };
            Ok(solve_field(geom, &pots, &q, settings, window)?.scaled(scale))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = fields.into_iter();
    let mut next = || it.next().expect("six basis solves");
    Ok(BasisFields {
        spec: *window,
        geometry_hash: geometry_hash(geom, settings, window),
        electrodes: [next(), next(), next(), next()],
        charges: [next(), next()],
    })
}

impl BasisFields {
    pub fn electrode(&self, e: Electrode) -> &VectorGrid {
        let i = Electrode::ALL.iter().position(|x| *x == e).unwrap();
        &self.electrodes[i]
    }

    pub fn charge(&self, c: ChargeSpecies) -> &VectorGrid {
        let i = ChargeSpecies::ALL.iter().position(|x| *x == c).unwrap();
        &self.charges[i]
    }

    /// `Σ_e V_e·B_e + σ_g·B_g + σ_s·B_s`.
    pub fn superpose(&self, pots: &PotentialSet, q: &ChargeDensities) -> VectorGrid {
        let mut out = VectorGrid::zeros(self.spec);
        for (e, b) in Electrode::ALL.iter().zip(&self.electrodes) {
            let v = pots.get(*e);
            for i in 0..out.fx.len() {
                out.fx[i] += v * b.fx[i];
                out.fy[i] += v * b.fy[i];
            }
        }
        for (c, b) in ChargeSpecies::ALL.iter().zip(&self.charges) {
            let s = q.get(*c);
            for i in 0..out.fx.len() {
                out.fx[i] += s * b.fx[i];
                out.fy[i] += s * b.fy[i];
            }
        }
        out
    }

    /// Electrode contribution only.
    pub fn applied(&self, pots: &PotentialSet) -> VectorGrid {
        self.superpose(pots, &ChargeDensities::default())
    }

    /// Charge contribution only, i.e. the stray field.
    pub fn stray(&self, q: &ChargeDensities) -> VectorGrid {
        self.superpose(&PotentialSet::zero("stray"), q)
    }

    /// Block-average every basis field.
    pub fn binned(&self, k: usize) -> Result<BasisFields> {
        if k == 1 {
            return Ok(self.clone());
        }
        let b = |g: &VectorGrid| g.binned(k);
        let e = &self.electrodes;
        let c = &self.charges;
        Ok(BasisFields {
            spec: self.spec.binned(k)?,
            geometry_hash: format!("{}-bin{k}", self.geometry_hash),
            electrodes: [b(&e[0])?, b(&e[1])?, b(&e[2])?, b(&e[3])?],
            charges: [b(&c[0])?, b(&c[1])?],
        })
    }

    fn entries(&self) -> Vec<(String, &VectorGrid)> {
        Electrode::ALL
            .iter()
            .zip(&self.electrodes)
            .map(|(e, g)| (format!("basis_{}.csv", e.name()), g))
            .chain(
                ChargeSpecies::ALL
                    .iter()
                    .zip(&self.charges)
                    .map(|(c, g)| (format!("basis_{}.csv", c.name()), g)),
            )
            .collect()
    }

    /// Write one grid file per entry plus `manifest.txt`.
    pub fn save(&self, dir: &Path, header: &[String]) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| SolveError::Cache(format!("{}: {e}", dir.display())))?;
        let mut manifest = format!("geometry_hash {}\ngridspec {}\n", self.geometry_hash, self.spec);
        for (name, g) in self.entries() {
            let mut h = header.to_vec();
            h.push(format!("geometry_hash {}", self.geometry_hash));
            grid::write_grid(&Grid::Vector(g.clone()), &dir.join(&name), &h)?;
            manifest.push_str(&format!("entry {name}\n"));
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| SolveError::Cache(format!("{}: {e}", path.display())))
    }

    /// Load a cached basis if its manifest carries `hash`.
    pub fn load(dir: &Path, hash: &str) -> Result<Option<BasisFields>> {
        let path = dir.join("manifest.txt");
        let Ok(text) = fs::read_to_string(&path) else {
            return Ok(None);
        };
        let stored = text
            .lines()
            .find_map(|l| l.strip_prefix("geometry_hash "))
            .unwrap_or("");
        if stored != hash {
            return Ok(None);
        }
        let read = |name: String| -> Result<VectorGrid> {
            grid::read_grid(&dir.join(&name))?
                .into_vector()
                .ok_or_else(|| SolveError::Cache(format!("{name} is not a vector grid")))
        };
        let e = |el: Electrode| read(format!("basis_{}.csv", el.name()));
        let c = |ch: ChargeSpecies| read(format!("basis_{}.csv", ch.name()));
        let electrodes = [
            e(Electrode::Center)?,
            e(Electrode::LeftGround)?,
            e(Electrode::RightGround)?,
            e(Electrode::Shield)?,
        ];
        let charges = [c(ChargeSpecies::Gap)?, c(ChargeSpecies::Surface)?];
        let spec = electrodes[0].spec;
        Ok(Some(BasisFields {
            spec,
            geometry_hash: hash.to_string(),
            electrodes,
            charges,
        }))
    }
}

/// Compute the basis, reusing `cache_dir` when its hash matches.
pub fn cached_basis(
    geom: &DeviceGeometry,
    settings: &SolverSettings,
    window: &GridSpec,
    cache_dir: &Path,
    header: &[String],
) -> Result<BasisFields> {
    let hash = geometry_hash(geom, settings, window);
    if let Some(b) = BasisFields::load(cache_dir, &hash)? {
        return Ok(b);
    }
    let b = compute_basis(geom, settings, window)?;
    b.save(cache_dir, header)?;
    Ok(b)
}
