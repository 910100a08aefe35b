//! Subcommands: read inputs, run a pipeline stage, write self-describing
//! outputs under the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use stark_tomo::electrostatics::{cached_basis, BasisFields, PotentialSet};
use stark_tomo::grid::{
    read_grid, render_heatmap, render_vector_overlay, write_grid, Grid, ScalarGrid, Scale, VectorGrid,
};
use stark_tomo::microwave::{fit_mode_weights, peak_position, RabiCampaign};
use stark_tomo::spectroscopy::{field_map_from_shifts, SpectrumStack};
use stark_tomo::stark::StarkConstants;

use crate::acceptance;
use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::pipeline;

pub const BASIS_DIR: &str = "basis";
pub const CAMPAIGN_DIR: &str = "campaign";
pub const SPECTRA_DIR: &str = "spectra";
pub const STRAY_DIR: &str = "stray";
pub const CHARGES_DIR: &str = "charges";
pub const COMPENSATE_DIR: &str = "compensate";
pub const MICROWAVE_DIR: &str = "microwave";
pub const VALIDATE_DIR: &str = "validate";

/// Arrow spacing of vector overlays, pixels.
const ARROW_STRIDE: usize = 8;

/// Configuration, its hash and the output root of one invocation.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: PipelineConfig,
    pub hash: String,
    pub out: PathBuf,
    pub consts: StarkConstants,
}

impl Context {
    /// `out` overrides the configured output directory.
    pub fn new(cfg: PipelineConfig, out: Option<PathBuf>) -> Self {
        let out = out.unwrap_or_else(|| cfg.output.dir.clone());
        Context {
            hash: cfg.hash(),
            cfg,
            out,
            consts: StarkConstants::default(),
        }
    }

    /// Header lines embedded in every grid and stack file.
    pub fn header(&self) -> Vec<String> {
        vec![format!("config_hash {}", self.hash), self.consts.header_line()]
    }

    fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.out.join(name);
        fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
        Ok(d)
    }

    fn constants_json(&self) -> Value {
        let k = &self.consts;
        json!({
            "delta_alpha_MHz_per_Vcm2": k.delta_alpha,
            "nu0_MHz": k.nu0,
            "dipole_ea0": k.dipole_ea0,
            "tau_34p_ns": k.tau_34p_ns,
        })
    }

    /// Write `body` with the config hash and constants added.
    fn write_json(&self, path: &Path, mut body: Value) -> Result<()> {
        body["config_hash"] = json!(self.hash);
        body["constants"] = self.constants_json();
        let text = serde_json::to_string_pretty(&body).expect("json serialises");
        fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    fn write_scalar(&self, g: &ScalarGrid, path: &Path, heatmap: bool) -> Result<()> {
        write_grid(&Grid::Scalar(g.clone()), path, &self.header())?;
        if heatmap && g.count_unmasked() > 0 {
            render_heatmap(g, &path.with_extension("ppm"), Scale::Auto)?;
        }
        Ok(())
    }

    fn write_vector(&self, g: &VectorGrid, path: &Path, overlay: bool) -> Result<()> {
        write_grid(&Grid::Vector(g.clone()), path, &self.header())?;
        if overlay && g.magnitude().count_unmasked() > 0 {
            render_vector_overlay(g, &path.with_extension("ppm"), ARROW_STRIDE)?;
        }
        Ok(())
    }

    /// Basis fields, from the cache under the output directory when valid.
    pub fn basis(&self) -> Result<BasisFields> {
        let dir = self.out.join(BASIS_DIR);
        let window = self.cfg.window()?;
        Ok(cached_basis(
            &self.cfg.geometry(),
            &self.cfg.solver_settings()?,
            &window,
            &dir,
            &self.header(),
        )?)
    }
}

fn read_vector(path: &Path) -> Result<VectorGrid> {
    read_grid(path)?
        .into_vector()
        .ok_or_else(|| CliError::Config(format!("{} is not a vector grid", path.display())))
}

fn read_scalar(path: &Path) -> Result<ScalarGrid> {
    read_grid(path)?
        .into_scalar()
        .ok_or_else(|| CliError::Config(format!("{} is not a scalar grid", path.display())))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn pots_json(p: &PotentialSet) -> Value {
    json!({ "label": p.label, "v_c": p.v_c, "v_l": p.v_l, "v_r": p.v_r, "v_s": p.v_s })
}

fn pots_from_json(v: &Value, path: &Path) -> Result<PotentialSet> {
    let f = |k: &str| {
        v[k].as_f64()
            .ok_or_else(|| CliError::Io(format!("{}: missing potential `{k}`", path.display())))
    };
    let label = v["label"].as_str().unwrap_or("rabi");
    Ok(PotentialSet::new(label, f("v_c")?, f("v_l")?, f("v_r")?, f("v_s")?))
}

fn counts_json(counts: &[(String, usize)]) -> Value {
    Value::Object(counts.iter().map(|(k, n)| (k.clone(), json!(n))).collect())
}

pub fn solve_basis(ctx: &Context) -> Result<Value> {
    let basis = ctx.basis()?;
    Ok(json!({
        "basis_dir": ctx.out.join(BASIS_DIR),
        "geometry_hash": basis.geometry_hash,
        "gridspec": basis.spec.to_string(),
    }))
}

pub fn synth_campaign(ctx: &Context) -> Result<Value> {
    let basis = ctx.basis()?;
    let camp = pipeline::synthesize(&ctx.cfg, &basis, &ctx.consts)?;
    let dir = ctx.dir(CAMPAIGN_DIR)?;
    let header = ctx.header();
    ctx.write_vector(&camp.stray, &dir.join("truth_stray.csv"), true)?;
    let mut stacks = serde_json::Map::new();
    for (label, stack) in &camp.stacks {
        let name = format!("{label}_stack.csv");
        stack.write(&dir.join(&name), &header)?;
        ctx.write_vector(
            &camp.fields[label],
            &dir.join(format!("truth_field_{label}.csv")),
            false,
        )?;
        stacks.insert(label.clone(), json!(name));
    }
    ctx.write_scalar(&camp.mw_field, &dir.join("truth_mw.csv"), true)?;
    camp.rabi.write(&dir.join("rabi.csv"), &header)?;
    let manifest = json!({
        "stacks": stacks,
        "rabi": "rabi.csv",
        "rabi_potentials": pots_json(&camp.rabi_pots),
        "truth_stray": "truth_stray.csv",
        "truth_mw": "truth_mw.csv",
    });
    ctx.write_json(&dir.join("manifest.json"), manifest.clone())?;
    Ok(manifest)
}

/// Stack files named by `input`: one file, or every `*_stack.csv` in a
/// directory.
fn stack_paths(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).map_err(|e| CliError::io(input, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with("_stack.csv"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Io(format!("{}: no *_stack.csv files", input.display())));
    }
    Ok(paths)
}

pub fn fit_spectra(ctx: &Context, input: Option<&Path>) -> Result<Value> {
    let input = input
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.out.join(CAMPAIGN_DIR));
    let dir = ctx.dir(SPECTRA_DIR)?;
    let mut summary = serde_json::Map::new();
    for path in stack_paths(&input)? {
        let stack = SpectrumStack::read(&path)?;
        let fit = pipeline::fit_spectra(&ctx.cfg, &stack)?;
        let label = &stack.meta.label;
        let field = field_map_from_shifts(&fit.shift, 0.0, &ctx.consts);
        ctx.write_scalar(&fit.shift, &dir.join(format!("{label}_shift.csv")), true)?;
        ctx.write_scalar(&fit.width, &dir.join(format!("{label}_width.csv")), true)?;
        ctx.write_scalar(&field.magnitude, &dir.join(format!("{label}_field.csv")), true)?;
        let body = json!({
            "label": label,
            "input": path,
            "binning": ctx.cfg.spectroscopy.binning,
            "status": counts_json(&fit.status_counts()),
            "clamped": field.clamped_count(),
        });
        ctx.write_json(&dir.join(format!("{label}_fit.json")), body.clone())?;
        summary.insert(label.clone(), body);
    }
    Ok(Value::Object(summary))
}

/// Shift maps for every configured label found in `dir`.
fn read_shifts(ctx: &Context, dir: &Path) -> Result<BTreeMap<String, ScalarGrid>> {
    let mut out = BTreeMap::new();
    for label in ctx.cfg.potentials.keys() {
        let path = dir.join(format!("{label}_shift.csv"));
        if path.exists() {
            out.insert(label.clone(), read_scalar(&path)?);
        }
    }
    for label in &ctx.cfg.reconstruction.measurements {
        if !out.contains_key(label) {
            let path = dir.join(format!("{label}_shift.csv"));
            return Err(CliError::Io(format!("{}: missing shift map", path.display())));
        }
    }
    Ok(out)
}

pub fn reconstruct_stray(ctx: &Context, input: Option<&Path>) -> Result<Value> {
    let input = input
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.out.join(SPECTRA_DIR));
    let shifts = read_shifts(ctx, &input)?;
    let basis = pipeline::basis_for(&ctx.cfg, &ctx.basis()?)?;
    let rec = pipeline::reconstruct(&ctx.cfg, &basis, &shifts, &ctx.consts)?;
    let r = &rec.result;
    let dir = ctx.dir(STRAY_DIR)?;
    ctx.write_vector(&r.stray, &dir.join("stray.csv"), true)?;
    ctx.write_scalar(&r.residual, &dir.join("residual.csv"), true)?;
    ctx.write_scalar(&r.condition, &dir.join("condition.csv"), false)?;
    let holdout = match &rec.holdout {
        Some((label, dev)) => {
            ctx.write_scalar(&dev.deviation, &dir.join("holdout_deviation.csv"), true)?;
            json!({ "label": label, "max_abs_V_per_cm": dev.max_abs, "rms_V_per_cm": dev.rms })
        }
        None => Value::Null,
    };
    let body = json!({
        "fz_V_per_cm": r.fz,
        "method": r.method.to_string(),
        "seed": r.seed,
        "reconstructed_pixels": r.stray.magnitude().count_unmasked(),
        "ill_conditioned": r.ill_conditioned,
        "boundary_hits": r.boundary_hits,
        "holdout": holdout,
    });
    ctx.write_json(&dir.join("stray.json"), body.clone())?;
    Ok(body)
}

pub fn fit_charges(ctx: &Context, input: Option<&Path>) -> Result<Value> {
    let input = input
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.out.join(SPECTRA_DIR));
    let shifts = read_shifts(ctx, &input)?;
    let basis = pipeline::basis_for(&ctx.cfg, &ctx.basis()?)?;
    let fit = pipeline::fit_charges(&ctx.cfg, &basis, &shifts, &ctx.consts)?;
    let dir = ctx.dir(CHARGES_DIR)?;
    let body = json!({
        "sigma_g_C_per_m2": fit.charges.sigma_g,
        "sigma_s_C_per_m2": fit.charges.sigma_s,
        "std_errors_C_per_m2": fit.std_errors,
        "rms_residual_V_per_cm": fit.rms_residual,
        "pixels": fit.pixels,
        "iterations": fit.iterations,
        "converged": fit.converged,
    });
    ctx.write_json(&dir.join("charges.json"), body.clone())?;
    if !fit.converged {
        return Err(CliError::Convergence(format!(
            "charge fit stopped after {} iterations",
            fit.iterations
        )));
    }
    Ok(body)
}

pub fn compensate(ctx: &Context, input: Option<&Path>) -> Result<Value> {
    let input = input
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.out.join(STRAY_DIR).join("stray.csv"));
    let stray = read_vector(&input)?;
    let basis = pipeline::basis_for(&ctx.cfg, &ctx.basis()?)?;
    let comp = pipeline::compensate_stray(&ctx.cfg, &basis, &stray)?;
    let dir = ctx.dir(COMPENSATE_DIR)?;
    ctx.write_scalar(&comp.residual, &dir.join("residual.csv"), true)?;
    let body = json!({
        "potentials": pots_json(&comp.pots),
        "region_max_V_per_cm": comp.region_max,
        "region_rms_V_per_cm": comp.region_rms,
        "stray_max_V_per_cm": comp.stray_max,
        "reduction": comp.reduction,
    });
    ctx.write_json(&dir.join("potentials.json"), body.clone())?;
    Ok(body)
}

pub fn mw_map(ctx: &Context, input: Option<&Path>) -> Result<Value> {
    let input = input
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.out.join(CAMPAIGN_DIR).join("rabi.csv"));
    let campaign = RabiCampaign::read(&input)?;
    let manifest_path = input.with_file_name("manifest.json");
    let manifest = read_json(&manifest_path)?;
    let rabi_pots = pots_from_json(&manifest["rabi_potentials"], &manifest_path)?;
    let stray_dir = ctx.out.join(STRAY_DIR);
    let stray = read_vector(&stray_dir.join("stray.csv"))?;
    let stray_json = stray_dir.join("stray.json");
    let fz = read_json(&stray_json)?["fz_V_per_cm"]
        .as_f64()
        .ok_or_else(|| CliError::Io(format!("{}: missing fz_V_per_cm", stray_json.display())))?;
    let basis = pipeline::basis_for(&ctx.cfg, &ctx.basis()?)?;
    let (detuning, map) = pipeline::microwave_map(&ctx.cfg, &basis, &campaign, &rabi_pots, &stray, fz, &ctx.consts)?;
    let dir = ctx.dir(MICROWAVE_DIR)?;
    ctx.write_scalar(&detuning, &dir.join("detuning.csv"), false)?;
    ctx.write_scalar(&map.field, &dir.join("field.csv"), true)?;
    ctx.write_scalar(&map.s, &dir.join("s.csv"), false)?;
    ctx.write_scalar(&map.s_error, &dir.join("s_error.csv"), false)?;
    let weights = if map.field.count_unmasked() >= 3 {
        fit_mode_weights(&basis, &map.field)
            .ok()
            .map(|(w, scale, rms)| json!({ "a": w.a, "b": w.b, "scale": scale, "rms": rms }))
    } else {
        None
    };
    let peak = peak_position(&map.field, &vec![true; map.field.spec.len()]);
    let body = json!({
        "theta_max_V": map.theta_max,
        "mapped_pixels": map.field.count_unmasked(),
        "status": counts_json(&map.status_counts()),
        "peak_position_um": peak,
        "mode_weights": weights,
    });
    ctx.write_json(&dir.join("mw.json"), body.clone())?;
    Ok(body)
}

pub fn validate(ctx: &Context) -> Result<Value> {
    let basis = ctx.basis()?;
    let report = acceptance::run_all(&ctx.cfg, &basis, &ctx.consts);
    let dir = ctx.dir(VALIDATE_DIR)?;
    for c in &report {
        eprintln!("{}", c.line());
    }
    let failed = report.iter().filter(|c| !c.passed).count();
    let body = json!({
        "passed": report.len() - failed,
        "total": report.len(),
        "checks": report,
    });
    ctx.write_json(&dir.join("report.json"), body.clone())?;
    if failed > 0 {
        return Err(CliError::ChecksFailed {
            failed,
            total: report.len(),
        });
    }
    Ok(body)
}
