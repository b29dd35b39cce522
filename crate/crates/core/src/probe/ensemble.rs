use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use super::PumpingModel;
use crate::error::{invalid, Result};
use crate::trap::{CouplingProfile, OrbitBankSettings, TrapPotential};

/// Shot-to-shot distribution of the loaded atom number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoadingModel {
    Poisson,
    Fixed,
    /// variance = `kappa` × mean
    Scaled { kappa: f64 },
    /// Integer uniform on `[min, max]`, used for atom-number scans.
    Uniform { min: u64, max: u64 },
}

/// Microwave pulse applied to the ensemble initially in |3,0⟩.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preparation {
    /// Coherent spin state.
    HalfPi,
    /// Coherent spin state via the opposite pulse area.
    ThreeHalfPi,
    /// Every atom transferred to |4,0⟩ (calibration traces).
    Pi,
}

impl Preparation {
    pub fn angle(self) -> f64 {
        match self {
            Self::HalfPi => FRAC_PI_2,
            Self::ThreeHalfPi => 3.0 * FRAC_PI_2,
            Self::Pi => PI,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub mean_atom_number: f64,
    pub loading: LoadingModel,
    /// K. Zero gives every atom the coupling of an atom at rest in the
    /// trap minimum.
    pub temperature: f64,
    /// Detection phase noise per sample, rad.
    pub phase_shot_noise: f64,
    pub trap: TrapPotential,
    pub coupling: CouplingProfile,
    pub pumping: PumpingModel,
    /// Time-resolved couplings along thermal orbits; otherwise each atom
    /// keeps its orbit-averaged coupling.
    pub motion_enabled: bool,
    pub preparation: Preparation,
    /// Relative pulse-area error of the preparation pulse.
    pub pulse_amplitude_error: f64,
    pub orbit_bank: OrbitBankSettings,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_atom_number >= 0.0 && self.mean_atom_number.is_finite()) {
            return Err(invalid("mean atom number must be non-negative"));
        }
        if !(self.phase_shot_noise >= 0.0 && self.phase_shot_noise.is_finite()) {
            return Err(invalid("phase shot noise must be non-negative"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature must be non-negative"));
        }
        if !self.pulse_amplitude_error.is_finite() {
            return Err(invalid("pulse amplitude error must be finite"));
        }
        match self.loading {
            LoadingModel::Scaled { kappa } if !(kappa >= 0.0 && kappa.is_finite()) => {
                return Err(invalid("loading dispersion factor must be non-negative"));
            }
            LoadingModel::Uniform { min, max } if min > max => {
                return Err(invalid("uniform loading needs min ≤ max"));
            }
            _ => {}
        }
        self.trap.validate()?;
        self.coupling.validate()?;
        self.pumping.validate()
    }

    /// True when every atom carries the same, constant coupling.
    pub fn is_homogeneous(&self) -> bool {
        self.temperature == 0.0
    }
}

/// Draws the loaded atom number.
pub fn sample_loading<R: Rng + ?Sized>(cfg: &EnsembleConfig, rng: &mut R) -> u64 {
    let mean = cfg.mean_atom_number;
    let poisson = |rng: &mut R, mean: f64| -> u64 {
        if mean > 0.0 {
            Poisson::new(mean).expect("positive finite mean").sample(rng) as u64
        } else {
            0
        }
    };
    match cfg.loading {
        LoadingModel::Fixed => mean.round() as u64,
        LoadingModel::Poisson => poisson(rng, mean),
        LoadingModel::Uniform { min, max } => rng.random_range(min..=max),
        LoadingModel::Scaled { kappa } => {
            if mean == 0.0 || kappa == 0.0 {
                mean.round() as u64
            } else if kappa == 1.0 {
                poisson(rng, mean)
            } else if kappa > 1.0 {
                // Gamma-mixed Poisson: var = mean (1 + θ)
                let theta = kappa - 1.0;
                let rate = Gamma::new(mean / theta, theta).expect("valid gamma").sample(rng);
                poisson(rng, rate)
            } else {
                // Binomial thinning: var = mean (1 − p)
                let p = 1.0 - kappa;
                let trials = (mean / p).round() as u64;
                Binomial::new(trials, p).expect("valid binomial").sample(rng)
            }
        }
    }
}

/// Applies a resonant pulse of area `angle` (π/2, π or 3π/2) to populations
/// `(n4, n3)`; each atom is transferred independently.
pub fn apply_pulse<R: Rng + ?Sized>(n4: u64, n3: u64, angle: f64, rng: &mut R) -> Result<(u64, u64)> {
    apply_pulse_with_error(n4, n3, angle, 0.0, rng)
}

/// As [`apply_pulse`] with the pulse area scaled by `1 + amplitude_error`.
pub fn apply_pulse_with_error<R: Rng + ?Sized>(
    n4: u64,
    n3: u64,
    angle: f64,
    amplitude_error: f64,
    rng: &mut R,
) -> Result<(u64, u64)> {
    let supported = [FRAC_PI_2, PI, 3.0 * FRAC_PI_2];
    let Some(&nominal) = supported.iter().find(|&&a| (a - angle).abs() < 1e-9) else {
        return Err(invalid(format!("unsupported pulse area {angle} rad")));
    };
    let p = if amplitude_error == 0.0 {
        if nominal == PI { 1.0 } else { 0.5 }
    } else {
        (0.5 * nominal * (1.0 + amplitude_error)).sin().powi(2)
    };
    let draw = |n: u64, rng: &mut R| -> u64 {
        if p >= 1.0 {
            n
        } else if p <= 0.0 || n == 0 {
            0
        } else {
            Binomial::new(n, p).expect("probability in range").sample(rng)
        }
    };
    let down = draw(n4, rng);
    let up = draw(n3, rng);
    Ok((n4 - down + up, n3 - up + down))
}
