//! Pipeline configuration: a TOML file with one table per stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stark_tomo::electrostatics::{ChargeDensities, DeviceGeometry, PotentialSet, Relaxation, SolverSettings};
use stark_tomo::grid::{polygon_mask, GridSpec};
use stark_tomo::microwave::{RabiFitOptions, RabiSynthParams};
use stark_tomo::reconstruction::{Bounds, Method, ReconOptions, SearchOptions};
use stark_tomo::spectroscopy::{detuning_range, BinMode, FitOptions, LineShape, SynthParams};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub output: OutputConfig,
    pub geometry: GeometryConfig,
    /// Analysis window shared by every map.
    pub grid: GridConfig,
    pub solver: SolverConfig,
    /// Charge densities that generate the synthetic stray field.
    pub charges: ChargesConfig,
    pub potentials: BTreeMap<String, PotentialsConfig>,
    pub beam: BeamConfig,
    pub spectroscopy: SpectroscopyConfig,
    pub reconstruction: ReconstructionConfig,
    pub compensation: CompensationConfig,
    pub microwave: MicrowaveConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub center_width: f64,
    pub gap_width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_extent: Option<f64>,
    pub shield_width: f64,
    pub shield_height: f64,
    pub layer_thickness: f64,
    pub gap_flux_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub x0: f64,
    pub y0: f64,
}

/// Either a fixed over-relaxation factor or `"optimal"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OmegaConfig {
    Fixed(f64),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub dx: f64,
    pub dy: f64,
    pub omega: OmegaConfig,
    pub tol: f64,
    pub max_iter: usize,
    pub extrapolate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChargesConfig {
    pub sigma_g: f64,
    pub sigma_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialsConfig {
    pub v_c: f64,
    pub v_l: f64,
    pub v_r: f64,
    pub v_s: f64,
}

/// Regular polygon inscribed in a circle, µm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircleConfig {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub sides: usize,
}

/// Beam cross-section, given either as explicit vertices or as a circle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polygon: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub circle: Option<CircleConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectroscopyConfig {
    pub detuning_start: f64,
    pub detuning_stop: f64,
    pub detuning_count: usize,
    pub pulse_ns: f64,
    pub depth: f64,
    pub baseline: f64,
    pub shape: String,
    /// Uniform out-of-plane stray field used for synthesis, V/cm.
    pub fz: f64,
    pub noise_sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub binning: usize,
    pub bin_mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionConfig {
    pub method: String,
    /// Labels of the maps that enter the reconstruction, in order.
    pub measurements: Vec<String>,
    /// Held-out label used to validate the reconstruction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<String>,
    /// Half-width of the random-search box, V/cm.
    pub bound: f64,
    /// Objective evaluations per pixel for the random search.
    pub iters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompensationConfig {
    /// Target region: beam pixels at or above this height, µm.
    pub region_y_min: f64,
    /// Potential limits applied to every electrode, V.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicrowaveConfig {
    /// Largest drive amplitude of the sweep, V.
    pub theta_stop: f64,
    pub theta_count: usize,
    /// Reference amplitude at which the field map is reported, V.
    pub theta_max: f64,
    pub pulse_ns: f64,
    pub tau_ns: f64,
    /// Even and odd mode weights of the synthetic microwave field.
    pub mode_a: f64,
    pub mode_b: f64,
    /// Peak microwave field at `theta_max`, mV/cm.
    pub mode_peak: f64,
    /// Drive frequency above the zero-field line, MHz.
    pub drive_offset: f64,
    pub noise_sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Replace every seed, including unset ones.
    pub fn override_seed(&mut self, seed: u64) {
        self.spectroscopy.seed = Some(seed);
        self.reconstruction.seed = Some(seed);
        self.microwave.seed = Some(seed);
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.geometry().validate()?;
        self.window()?;
        self.solver_settings()?.validate()?;
        if self.potentials.is_empty() {
            return bad("no potential sets defined".into());
        }
        let labels = self
            .reconstruction
            .measurements
            .iter()
            .chain(&self.reconstruction.holdout);
        for l in labels {
            if !self.potentials.contains_key(l) {
                return bad(format!("reconstruction refers to undefined potential set `{l}`"));
            }
        }
        if self.reconstruction.measurements.len() < 3 {
            return bad("reconstruction needs at least three measurements".into());
        }
        let s = &self.spectroscopy;
        if s.noise_sigma > 0.0 && s.seed.is_none() {
            return bad("spectroscopy.seed is required when noise_sigma > 0".into());
        }
        if !(s.noise_sigma >= 0.0 && s.fz >= 0.0 && s.pulse_ns > 0.0) {
            return bad("spectroscopy: noise_sigma and fz must be non-negative, pulse_ns positive".into());
        }
        if s.binning == 0 {
            return bad("spectroscopy.binning must be at least 1".into());
        }
        detuning_range(s.detuning_start, s.detuning_stop, s.detuning_count)?;
        self.line_shape()?;
        self.bin_mode()?;
        let method = self.method()?;
        if method == Method::RandomSearch && self.reconstruction.seed.is_none() {
            return bad("reconstruction.seed is required for random-search".into());
        }
        if !(self.reconstruction.bound > 0.0) || self.reconstruction.iters == 0 {
            return bad("reconstruction.bound and iters must be positive".into());
        }
        if let Some([lo, hi]) = self.compensation.bounds {
            if !(lo <= hi) {
                return bad(format!("compensation.bounds [{lo}, {hi}] is empty"));
            }
        }
        let m = &self.microwave;
        if m.noise_sigma > 0.0 && m.seed.is_none() {
            return bad("microwave.seed is required when noise_sigma > 0".into());
        }
        if !(m.theta_stop > 0.0 && m.theta_max > 0.0 && m.pulse_ns > 0.0 && m.tau_ns > 0.0 && m.mode_peak > 0.0) {
            return bad("microwave: amplitudes, pulse, decay time and peak field must be positive".into());
        }
        if m.theta_count < 2 {
            return bad("microwave.theta_count must be at least 2".into());
        }
        let beam = &self.beam;
        match (&beam.polygon, &beam.circle) {
            (Some(p), None) if p.len() >= 3 => {}
            (None, Some(c)) if c.radius > 0.0 && c.sides >= 3 => {}
            _ => return bad("beam needs either a polygon of at least 3 vertices or a circle".into()),
        }
        Ok(())
    }

    pub fn geometry(&self) -> DeviceGeometry {
        let g = &self.geometry;
        DeviceGeometry {
            center_width: g.center_width,
            gap_width: g.gap_width,
            ground_extent: g.ground_extent,
            shield_width: g.shield_width,
            shield_height: g.shield_height,
            layer_thickness: g.layer_thickness,
            gap_flux_fraction: g.gap_flux_fraction,
        }
    }

    pub fn window(&self) -> Result<GridSpec> {
        let g = &self.grid;
        Ok(GridSpec::new(g.nx, g.ny, g.dx, g.dy, g.x0, g.y0)?)
    }

    pub fn solver_settings(&self) -> Result<SolverSettings> {
        let s = &self.solver;
        let omega = match &s.omega {
            OmegaConfig::Fixed(w) => Relaxation::Fixed(*w),
            OmegaConfig::Named(n) if n == "optimal" => Relaxation::Optimal,
            OmegaConfig::Named(n) => {
                return Err(CliError::Config(format!(
                    "solver.omega `{n}` is neither a number nor \"optimal\""
                )))
            }
        };
        Ok(SolverSettings {
            dx: s.dx,
            dy: s.dy,
            omega,
            tol: s.tol,
            max_iter: s.max_iter,
            extrapolate: s.extrapolate,
        })
    }

    pub fn charges(&self) -> ChargeDensities {
        ChargeDensities {
            sigma_g: self.charges.sigma_g,
            sigma_s: self.charges.sigma_s,
        }
    }

    pub fn potential_set(&self, label: &str) -> Result<PotentialSet> {
        let p = self
            .potentials
            .get(label)
            .ok_or_else(|| CliError::Config(format!("undefined potential set `{label}`")))?;
        Ok(PotentialSet::new(label, p.v_c, p.v_l, p.v_r, p.v_s))
    }

    pub fn measurement_sets(&self) -> Result<Vec<PotentialSet>> {
        self.reconstruction
            .measurements
            .iter()
            .map(|l| self.potential_set(l))
            .collect()
    }

    pub fn holdout_set(&self) -> Result<Option<PotentialSet>> {
        self.reconstruction
            .holdout
            .as_deref()
            .map(|l| self.potential_set(l))
            .transpose()
    }

    pub fn beam_polygon(&self) -> Vec<(f64, f64)> {
        match (&self.beam.polygon, &self.beam.circle) {
            (Some(p), _) => p.iter().map(|v| (v[0], v[1])).collect(),
            (None, Some(c)) => (0..c.sides)
                .map(|k| {
                    let a = k as f64 / c.sides as f64 * std::f64::consts::TAU;
                    (c.x + c.radius * a.cos(), c.y + c.radius * a.sin())
                })
                .collect(),
            (None, None) => Vec::new(),
        }
    }

    /// `true` on pixels of `spec` inside the beam.
    pub fn beam_region(&self, spec: &GridSpec) -> Vec<bool> {
        polygon_mask(spec, &self.beam_polygon()).iter().map(|m| !m).collect()
    }

    /// Beam pixels of `spec` at or above `compensation.region_y_min`.
    pub fn compensation_region(&self, spec: &GridSpec) -> Vec<bool> {
        let beam = self.beam_region(spec);
        (0..spec.len())
            .map(|i| beam[i] && spec.y(spec.coords(i).1) >= self.compensation.region_y_min - 1e-9)
            .collect()
    }

    pub fn compensation_bounds(&self) -> Option<[(f64, f64); 4]> {
        self.compensation.bounds.map(|[lo, hi]| [(lo, hi); 4])
    }

    pub fn detunings(&self) -> Result<Vec<f64>> {
        let s = &self.spectroscopy;
        Ok(detuning_range(s.detuning_start, s.detuning_stop, s.detuning_count)?)
    }

    pub fn line_shape(&self) -> Result<LineShape> {
        self.spectroscopy.shape.parse().map_err(CliError::Config)
    }

    pub fn bin_mode(&self) -> Result<BinMode> {
        self.spectroscopy.bin_mode.parse().map_err(CliError::Config)
    }

    pub fn method(&self) -> Result<Method> {
        self.reconstruction.method.parse().map_err(CliError::Config)
    }

    pub fn synth_params(&self, label: &str) -> Result<SynthParams> {
        let s = &self.spectroscopy;
        Ok(SynthParams {
            pulse_ns: s.pulse_ns,
            depth: s.depth,
            baseline: s.baseline,
            noise_sigma: s.noise_sigma,
            seed: s.seed.unwrap_or(0),
            shape: self.line_shape()?,
            label: label.to_string(),
        })
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions::for_pulse(self.spectroscopy.pulse_ns)
    }

    pub fn recon_options(&self) -> Result<ReconOptions> {
        let r = &self.reconstruction;
        let defaults = SearchOptions::default();
        Ok(ReconOptions {
            method: self.method()?,
            search: SearchOptions {
                bounds: Bounds::symmetric(r.bound),
                budget: r.iters,
                initial: defaults.initial.min(r.iters),
                ..defaults
            },
            seed: r.seed.unwrap_or(0),
        })
    }

    pub fn rabi_synth_params(&self) -> RabiSynthParams {
        let m = &self.microwave;
        RabiSynthParams {
            pulse_ns: m.pulse_ns,
            tau_ns: m.tau_ns,
            noise_sigma: m.noise_sigma,
            seed: m.seed.unwrap_or(0),
            label: "rabi".into(),
        }
    }

    pub fn rabi_fit_options(&self) -> RabiFitOptions {
        RabiFitOptions {
            tau_ns: self.microwave.tau_ns,
            ..RabiFitOptions::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHIPPED: &str = include_str!("../../../config/default.toml");

    #[test]
    fn shipped_config_parses_and_validates() {
        let cfg = PipelineConfig::from_toml(SHIPPED).unwrap();
        assert_eq!(cfg.reconstruction.measurements, ["a", "b", "c"]);
        assert_eq!(cfg.solver_settings().unwrap().omega, Relaxation::Optimal);
        assert_eq!(cfg.beam_polygon().len(), 64);
    }

    #[test]
    fn hash_tracks_every_field_and_the_seed_override() {
        let cfg = PipelineConfig::from_toml(SHIPPED).unwrap();
        assert_eq!(cfg.hash(), cfg.clone().hash());
        let mut other = cfg.clone();
        other.charges.sigma_s *= 1.0 + 1e-12;
        assert_ne!(cfg.hash(), other.hash());
        let mut seeded = cfg.clone();
        seeded.override_seed(99);
        assert_ne!(cfg.hash(), seeded.hash());
    }

    #[test]
    fn undefined_label_is_a_config_error() {
        let text = SHIPPED.replace("holdout = \"d\"", "holdout = \"zz\"");
        assert!(matches!(PipelineConfig::from_toml(&text), Err(CliError::Config(_))));
    }

    #[test]
    fn noise_without_seed_is_rejected() {
        let mut cfg = PipelineConfig::from_toml(SHIPPED).unwrap();
        cfg.spectroscopy.noise_sigma = 0.02;
        cfg.spectroscopy.seed = None;
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        cfg.override_seed(5);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn random_search_without_seed_is_rejected() {
        let mut cfg = PipelineConfig::from_toml(SHIPPED).unwrap();
        cfg.reconstruction.method = "random-search".into();
        cfg.reconstruction.seed = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = SHIPPED.replace("[charges]", "[charges]\nsigma_x = 1.0");
        assert!(PipelineConfig::from_toml(&text).is_err());
    }

    #[test]
    fn omega_accepts_a_number_or_optimal() {
        let text = SHIPPED.replace("omega = \"optimal\"", "omega = 1.9");
        let cfg = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.solver_settings().unwrap().omega, Relaxation::Fixed(1.9));
        let text = SHIPPED.replace("omega = \"optimal\"", "omega = \"fast\"");
        assert!(PipelineConfig::from_toml(&text).is_err());
    }
}
