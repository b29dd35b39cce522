#![allow(dead_code)]

use qndsim::pipeline::PipelineConfig;
use qndsim::probe::{EnsembleConfig, LoadingModel, Preparation, ProbeSchedule, PumpingModel};
use qndsim::trap::{CouplingProfile, TrapPotential};

pub fn defaults() -> PipelineConfig {
    PipelineConfig::default()
}

pub fn trap() -> TrapPotential {
    defaults().trap_potential().unwrap()
}

pub fn coupling() -> CouplingProfile {
    defaults().coupling_profile()
}

pub fn model() -> PumpingModel {
    defaults().pumping_model()
}

pub fn population_schedule() -> ProbeSchedule {
    defaults().population_schedule()
}

pub fn qnd_schedule() -> ProbeSchedule {
    defaults().qnd_schedule()
}

/// Fixed-N, zero-temperature ensemble with every atom at the reference
/// coupling of 2 mrad.
pub fn homogeneous(atoms: f64, noise: f64) -> EnsembleConfig {
    EnsembleConfig {
        mean_atom_number: atoms,
        loading: LoadingModel::Fixed,
        temperature: 0.0,
        phase_shot_noise: noise,
        motion_enabled: false,
        preparation: Preparation::HalfPi,
        ..defaults().ensemble_config().unwrap()
    }
}

/// Default thermal ensemble with a small orbit bank for quick tests.
pub fn thermal(atoms: f64, noise: f64, motion: bool) -> EnsembleConfig {
    let mut cfg = defaults().ensemble_config().unwrap();
    cfg.mean_atom_number = atoms;
    cfg.loading = LoadingModel::Fixed;
    cfg.phase_shot_noise = noise;
    cfg.motion_enabled = motion;
    cfg.orbit_bank.size = 512;
    cfg
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (xs.len() as f64 - 1.0)
}
