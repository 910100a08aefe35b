//! Quadratic Stark shift of the He 34s → 34p transition and lineshape
//! constants.
//!
//! Units: field in V/cm, frequency in MHz, time in ns.

use thiserror::Error;

/// Elementary charge, C.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
/// Bohr radius, m.
pub const BOHR_RADIUS: f64 = 5.291_772_109_03e-11;
/// Reduced Planck constant, J·s.
pub const HBAR: f64 = 1.054_571_817e-34;
/// Vacuum permittivity, F/m.
pub const EPSILON_0: f64 = 8.854_187_812_8e-12;

/// FWHM × duration of the sinc² power spectrum of a square pulse:
/// `2·u/π` where `sin²u/u² = 1/2`.
pub const SINC2_FWHM_PRODUCT: f64 = 0.885_892_941_378_9;

#[derive(Debug, Error, PartialEq)]
pub enum StarkError {
    #[error("negative Stark shift {0} MHz has no real field")]
    NegativeShift(f64),
}

/// Atomic constants of the 34s → 34p transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StarkConstants {
    /// Polarisability difference, MHz/(V/cm)².
    pub delta_alpha: f64,
    /// Zero-field transition frequency, MHz.
    pub nu0: f64,
    /// Transition dipole moment in units of e·a₀.
    pub dipole_ea0: f64,
    /// Upper bound on the 34p lifetime, ns.
    pub tau_34p_ns: f64,
}

impl Default for StarkConstants {
    fn default() -> Self {
        StarkConstants {
            delta_alpha: 1078.03,
            nu0: 27_965.773,
            dipole_ea0: 917.0,
            tau_34p_ns: 2000.0,
        }
    }
}

impl StarkConstants {
    /// Dipole moment, C·m.
    pub fn dipole_si(&self) -> f64 {
        self.dipole_ea0 * ELEMENTARY_CHARGE * BOHR_RADIUS
    }

    /// Angular Rabi frequency per unit microwave field, (rad/ns)/(mV/cm).
    pub fn rabi_per_mv_cm(&self) -> f64 {
        // 1 mV/cm = 0.1 V/m; rad/s -> rad/ns
        self.dipole_si() * 0.1 / HBAR * 1e-9
    }

    /// `½·Δα·|F|²` for a field vector of any dimension.
    pub fn stark_shift(&self, field: &[f64]) -> f64 {
        let f2: f64 = field.iter().map(|c| c * c).sum();
        0.5 * self.delta_alpha * f2
    }

    pub fn stark_shift_magnitude(&self, f: f64) -> f64 {
        0.5 * self.delta_alpha * f * f
    }

    /// Inverse of [`stark_shift`](Self::stark_shift): |F| = sqrt(2·shift/Δα).
    pub fn field_magnitude_from_shift(&self, shift: f64) -> Result<f64, StarkError> {
        if shift < 0.0 || shift.is_nan() {
            return Err(StarkError::NegativeShift(shift));
        }
        Ok((2.0 * shift / self.delta_alpha).sqrt())
    }

    /// Stark-shift spread across a pixel whose field magnitude varies by
    /// `df` around `f`, added in quadrature to the unbroadened width.
    pub fn broadened_fwhm(&self, f: f64, df: f64, fwhm0: f64) -> f64 {
        let inhom = self.delta_alpha * f.abs() * df.abs();
        fwhm0.hypot(inhom)
    }

    /// One-line summary echoed into output headers.
    pub fn header_line(&self) -> String {
        format!(
            "constants delta_alpha_MHz_per_Vcm2={} nu0_MHz={} dipole_ea0={} tau_34p_ns={}",
            self.delta_alpha, self.nu0, self.dipole_ea0, self.tau_34p_ns
        )
    }
}

/// Fourier-limited FWHM (MHz) of a square pulse of the given length (ns).
pub fn fourier_fwhm(pulse_ns: f64) -> f64 {
    SINC2_FWHM_PRODUCT * 1e3 / pulse_ns
}
