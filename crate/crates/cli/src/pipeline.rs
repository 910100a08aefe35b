//! In-memory pipeline stages. Commands wrap these with file I/O; the
//! acceptance checks call them directly.

use std::collections::BTreeMap;

use stark_tomo::electrostatics::{BasisFields, PotentialSet};
use stark_tomo::grid::{ScalarGrid, Unit, VectorGrid};
use stark_tomo::microwave::{
    detuning_map, map_microwave, mode_field, synth_rabi, theta_sweep, MwFieldMap, RabiCampaign,
};
use stark_tomo::reconstruction::{
    compensate, estimate_fz, fit_charge_densities, reconstruct_stray, validate_superposition, ChargeFit,
    ChargeFitInput, Compensation, Deviation, Measurement, StrayFieldResult,
};
use stark_tomo::spectroscopy::{field_map_from_shifts, fit_stack, synth_stack, SpectrumStack, StackFit};
use stark_tomo::stark::StarkConstants;

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

/// Synthetic data and the ground truth it was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct Campaign {
    /// Charge-generated stray field, masked outside the beam.
    pub stray: VectorGrid,
    /// In-plane total field per potential-set label.
    pub fields: BTreeMap<String, VectorGrid>,
    pub stacks: BTreeMap<String, SpectrumStack>,
    /// Potentials under which the Rabi campaign is taken.
    pub rabi_pots: PotentialSet,
    /// Microwave field at `theta_max`, mV/cm.
    pub mw_field: ScalarGrid,
    pub rabi: RabiCampaign,
}

/// Forward model of every measurement the configuration describes.
///
/// The Rabi campaign is taken with the stray field compensated over the
/// configured region, using the true stray field to choose the potentials.
pub fn synthesize(cfg: &PipelineConfig, basis: &BasisFields, consts: &StarkConstants) -> Result<Campaign> {
    let spec = basis.spec;
    let outside: Vec<bool> = cfg.beam_region(&spec).iter().map(|b| !b).collect();
    let stray = basis.stray(&cfg.charges()).with_mask(&outside);
    let detunings = cfg.detunings()?;
    let fz = cfg.spectroscopy.fz;
    let mut fields = BTreeMap::new();
    let mut stacks = BTreeMap::new();
    for label in cfg.potentials.keys() {
        let pots = cfg.potential_set(label)?;
        let mut total = basis.applied(&pots);
        total.add_scaled(&stray, 1.0)?;
        let total = total.with_mask(&outside);
        let stack = synth_stack(&total, fz, &detunings, &cfg.synth_params(label)?, consts)?;
        fields.insert(label.clone(), total);
        stacks.insert(label.clone(), stack);
    }

    let region = cfg.compensation_region(&spec);
    let comp = compensate(&stray, basis, &region, cfg.compensation_bounds(), "rabi")?;
    let shift = predicted_shift(basis, &comp.pots, &stray, fz, consts)?;
    let m = &cfg.microwave;
    let detuning = detuning_map(&shift, m.drive_offset);
    let (_, shape) = mode_field(basis, m.mode_a, m.mode_b);
    let mw_field = shape.map(Unit::MilliVoltPerCm, |v| v * m.mode_peak);
    let mw_field = ScalarGrid {
        mask: mw_field.mask.iter().zip(&outside).map(|(a, b)| *a || *b).collect(),
        ..mw_field
    };
    let thetas = theta_sweep(m.theta_stop, m.theta_count)?;
    let rabi = synth_rabi(
        &mw_field,
        m.theta_max,
        &detuning,
        &thetas,
        &cfg.rabi_synth_params(),
        consts,
    )?;
    Ok(Campaign {
        stray,
        fields,
        stacks,
        rabi_pots: comp.pots,
        mw_field,
        rabi,
    })
}

/// Stark shift of `|applied + stray|` with the out-of-plane component `fz`.
pub fn predicted_shift(
    basis: &BasisFields,
    pots: &PotentialSet,
    stray: &VectorGrid,
    fz: f64,
    consts: &StarkConstants,
) -> Result<ScalarGrid> {
    let mut total = basis.applied(pots);
    total.add_scaled(stray, 1.0)?;
    Ok(total
        .magnitude()
        .map(Unit::MHz, |m| consts.stark_shift_magnitude(m.hypot(fz))))
}

/// Fit one stack after checking it was taken on the configured window.
pub fn fit_spectra(cfg: &PipelineConfig, stack: &SpectrumStack) -> Result<StackFit> {
    let window = cfg.window()?;
    if !stack.spec.approx_eq(&window) {
        return Err(CliError::Config(format!(
            "stack `{}` has grid {} but the configured window is {}",
            stack.meta.label, stack.spec, window
        )));
    }
    Ok(fit_stack(
        stack,
        cfg.spectroscopy.binning,
        cfg.bin_mode()?,
        &cfg.fit_options(),
    )?)
}

/// Basis on the raster of the fitted maps.
pub fn basis_for(cfg: &PipelineConfig, basis: &BasisFields) -> Result<BasisFields> {
    Ok(basis.binned(cfg.spectroscopy.binning)?)
}

/// Shift map for `label`, or a config error naming the missing label.
fn shift_of<'a>(shifts: &'a BTreeMap<String, ScalarGrid>, label: &str) -> Result<&'a ScalarGrid> {
    shifts
        .get(label)
        .ok_or_else(|| CliError::Config(format!("no shift map for potential set `{label}`")))
}

/// `fz` estimated from the field minima of the measurement maps.
pub fn estimated_fz(
    cfg: &PipelineConfig,
    shifts: &BTreeMap<String, ScalarGrid>,
    consts: &StarkConstants,
) -> Result<f64> {
    let maps = cfg
        .reconstruction
        .measurements
        .iter()
        .map(|l| shift_of(shifts, l))
        .collect::<Result<Vec<_>>>()?;
    estimate_fz(&maps, consts).ok_or_else(|| CliError::Config("all shift maps are fully masked".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub result: StrayFieldResult,
    /// Held-out label and its predicted-minus-measured magnitude.
    pub holdout: Option<(String, Deviation)>,
}

/// Stray field from the measurement maps, validated on the held-out map.
pub fn reconstruct(
    cfg: &PipelineConfig,
    basis: &BasisFields,
    shifts: &BTreeMap<String, ScalarGrid>,
    consts: &StarkConstants,
) -> Result<Reconstruction> {
    let fz = estimated_fz(cfg, shifts, consts)?;
    let meas = cfg
        .measurement_sets()?
        .into_iter()
        .map(|pots| {
            let fm = field_map_from_shifts(shift_of(shifts, &pots.label)?, fz, consts);
            Ok(Measurement::from_basis(pots, basis, fm.magnitude)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let result = reconstruct_stray(&meas, fz, &cfg.recon_options()?)?;
    let holdout = match cfg.holdout_set()? {
        Some(pots) if shifts.contains_key(&pots.label) => {
            let measured = field_map_from_shifts(&shifts[&pots.label], fz, consts).magnitude;
            let dev = validate_superposition(&result.stray, &pots, basis, &measured)?;
            Some((pots.label, dev))
        }
        _ => None,
    };
    Ok(Reconstruction { result, holdout })
}

/// Charge densities from the total-field magnitudes of the measurement maps.
pub fn fit_charges(
    cfg: &PipelineConfig,
    basis: &BasisFields,
    shifts: &BTreeMap<String, ScalarGrid>,
    consts: &StarkConstants,
) -> Result<ChargeFit> {
    let fz = estimated_fz(cfg, shifts, consts)?;
    let outside: Vec<bool> = cfg.beam_region(&basis.spec).iter().map(|b| !b).collect();
    let sets = cfg.measurement_sets()?;
    let totals = sets
        .iter()
        .map(|p| {
            let shift = shift_of(shifts, &p.label)?;
            let mut m = shift.map(Unit::VoltPerCm, |s| (2.0 * s.max(0.0) / consts.delta_alpha).sqrt());
            for (mk, o) in m.mask.iter_mut().zip(&outside) {
                *mk |= *o;
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<ChargeFitInput> = totals
        .iter()
        .zip(&sets)
        .map(|(magnitude, pots)| ChargeFitInput { magnitude, pots })
        .collect();
    Ok(fit_charge_densities(&inputs, basis, fz)?)
}

/// Potentials that cancel `stray` over the configured region.
pub fn compensate_stray(cfg: &PipelineConfig, basis: &BasisFields, stray: &VectorGrid) -> Result<Compensation> {
    let region = cfg.compensation_region(&basis.spec);
    Ok(compensate(
        stray,
        basis,
        &region,
        cfg.compensation_bounds(),
        "compensated",
    )?)
}

/// Microwave field map. The detuning at each pixel follows from the
/// reconstructed stray field and the potentials of the Rabi campaign.
pub fn microwave_map(
    cfg: &PipelineConfig,
    basis: &BasisFields,
    campaign: &RabiCampaign,
    rabi_pots: &PotentialSet,
    stray: &VectorGrid,
    fz: f64,
    consts: &StarkConstants,
) -> Result<(ScalarGrid, MwFieldMap)> {
    let shift = predicted_shift(basis, rabi_pots, stray, fz, consts)?;
    let detuning = detuning_map(&shift, cfg.microwave.drive_offset);
    let map = map_microwave(
        campaign,
        &detuning,
        cfg.microwave.theta_max,
        &cfg.rabi_fit_options(),
        consts,
    )?;
    Ok((detuning, map))
}
