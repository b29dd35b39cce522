use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{apply_pulse_with_error, sample_loading, EnsembleConfig, ProbeSchedule};
use crate::error::Result;
use crate::trap::OrbitBank;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotTruth {
    pub n_atoms: u64,
    /// Atoms in |4,0⟩ after preparation.
    pub n_upper: u64,
    /// Atoms in |3,0⟩ after preparation.
    pub n_lower: u64,
    /// Time-averaged coupling of every atom, rad; the first `n_upper`
    /// entries belong to |4,0⟩.
    pub couplings: Vec<f64>,
}

impl ShotTruth {
    pub fn upper_coupling_sum(&self) -> f64 {
        self.couplings[..self.n_upper as usize].iter().sum()
    }

    pub fn lower_coupling_sum(&self) -> f64 {
        self.couplings[self.n_upper as usize..].iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub shot_id: u64,
    /// Seed of the shot's private random stream.
    pub seed: u64,
    pub schedule: ProbeSchedule,
    /// Phase at `schedule.sample_times()`, rad.
    pub trace: Vec<f64>,
    pub truth: ShotTruth,
}

/// Shot generator for one ensemble configuration and schedule.
///
/// Holds the sample grid, the pumping response evaluated on it, and (for a
/// thermal ensemble) the orbit bank shared by all shots.
#[derive(Debug, Clone)]
pub struct ShotSynthesizer {
    cfg: EnsembleConfig,
    schedule: ProbeSchedule,
    times: Vec<f64>,
    n_pre: usize,
    /// m̂(t) for atoms in |4,0⟩ before the swap
    response_upper: Vec<f64>,
    /// m̂(t − t_flip) for atoms swapped into the probed state; zero before
    response_lower: Vec<f64>,
    bank: Option<Arc<OrbitBank>>,
}

impl ShotSynthesizer {
    /// Builds the generator, computing an orbit bank from `bank_seed` when
    /// the ensemble is thermal.
    pub fn new(cfg: &EnsembleConfig, schedule: &ProbeSchedule, bank_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let bank = if cfg.is_homogeneous() {
            None
        } else {
            Some(Arc::new(OrbitBank::build(
                &cfg.trap,
                &cfg.coupling,
                cfg.temperature,
                &cfg.orbit_bank,
                bank_seed,
            )?))
        };
        Self::with_bank(cfg, schedule, bank)
    }

    /// Builds the generator around an existing bank (ignored for a
    /// homogeneous ensemble).
    pub fn with_bank(
        cfg: &EnsembleConfig,
        schedule: &ProbeSchedule,
        bank: Option<Arc<OrbitBank>>,
    ) -> Result<Self> {
        cfg.validate()?;
        schedule.validate()?;
        let bank = if cfg.is_homogeneous() {
            None
        } else {
            Some(bank.ok_or_else(|| {
                crate::error::invalid("thermal ensemble requires an orbit bank")
            })?)
        };
        let times = schedule.sample_times();
        let n_pre = schedule.segment1_samples();
        let t_flip = schedule.t_flip();
        let response_upper = times.iter().map(|&t| cfg.pumping.eval(t)).collect();
        let response_lower = times
            .iter()
            .enumerate()
            .map(|(i, &t)| if i < n_pre { 0.0 } else { cfg.pumping.eval(t - t_flip) })
            .collect();
        Ok(Self {
            cfg: *cfg,
            schedule: *schedule,
            times,
            n_pre,
            response_upper,
            response_lower,
            bank,
        })
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &ProbeSchedule {
        &self.schedule
    }

    pub fn bank(&self) -> Option<&Arc<OrbitBank>> {
        self.bank.as_ref()
    }

    pub fn synthesize(&self, shot_id: u64, seed: u64) -> ShotRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = &self.cfg;
        let n = sample_loading(cfg, &mut rng);
        let angle = cfg.preparation.angle();
        let (n_upper, n_lower) =
            apply_pulse_with_error(0, n, angle, cfg.pulse_amplitude_error, &mut rng)
                .expect("preparation pulse area is always supported");
        let len = self.times.len();
        let mut upper = vec![0.0; len];
        let mut lower = vec![0.0; len];
        let mut couplings = Vec::with_capacity(n as usize);
        match &self.bank {
            None => {
                let phi = cfg.coupling.at(cfg.coupling.reference_position);
                couplings.resize(n as usize, phi);
                upper.fill(n_upper as f64 * phi);
                lower.fill(n_lower as f64 * phi);
            }
            Some(bank) => {
                for k in 0..n {
                    let orbit = bank.pick(&mut rng);
                    let offset = orbit.random_offset(&mut rng);
                    couplings.push(orbit.mean_coupling);
                    let target = if k < n_upper { &mut upper } else { &mut lower };
                    if cfg.motion_enabled {
                        for (acc, &t) in target.iter_mut().zip(&self.times) {
                            *acc += orbit.coupling_at(offset + t);
                        }
                    } else {
                        target.iter_mut().for_each(|acc| *acc += orbit.mean_coupling);
                    }
                }
            }
        }
        let sigma = cfg.phase_shot_noise;
        let trace = (0..len)
            .map(|i| {
                let mean = self.response_upper[i] * upper[i]
                    + if i < self.n_pre { 0.0 } else { self.response_lower[i] * lower[i] };
                mean + sigma * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        ShotRecord {
            shot_id,
            seed,
            schedule: self.schedule,
            trace,
            truth: ShotTruth { n_atoms: n, n_upper, n_lower, couplings },
        }
    }
}

/// One-off shot synthesis. Builds a fresh orbit bank for thermal ensembles,
/// so batches should use [`ShotSynthesizer`] directly.
pub fn synthesize_shot<R: Rng + ?Sized>(
    cfg: &EnsembleConfig,
    s: &ProbeSchedule,
    rng: &mut R,
) -> Result<ShotRecord> {
    let bank_seed = rng.random::<u64>();
    let synth = ShotSynthesizer::new(cfg, s, bank_seed)?;
    Ok(synth.synthesize(0, rng.random::<u64>()))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::physics::BOLTZMANN;
    use crate::probe::{two_segment_mean, LoadingModel, Preparation, PumpingModel};
    use crate::trap::{CouplingProfile, OrbitBankSettings, TrapPotential};

    pub(crate) fn homogeneous_config(mean: f64, noise: f64) -> EnsembleConfig {
        let trap =
            TrapPotential::from_depth(BOLTZMANN * 250e-6, 50e-9, 1000e-9, 230e-9, 250e-9).unwrap();
        EnsembleConfig {
            mean_atom_number: mean,
            loading: LoadingModel::Fixed,
            temperature: 0.0,
            phase_shot_noise: noise,
            trap,
            coupling: CouplingProfile {
                peak_phase_per_atom: 2e-3,
                probe_decay_length: 190e-9,
                reference_position: 230e-9,
            },
            pumping: PumpingModel { beta: 1.6, tau_at: 10e-6, tau_loss: 400e-6 },
            motion_enabled: false,
            preparation: Preparation::HalfPi,
            pulse_amplitude_error: 0.0,
            orbit_bank: OrbitBankSettings {
                size: 64,
                time_step: 2.5e-9,
                table_step: 25e-9,
                horizon: 400e-6,
            },
        }
    }

    const SCHEDULE: ProbeSchedule = ProbeSchedule {
        segment1_duration: 8e-6,
        gap_duration: 32e-6,
        segment2_duration: 120e-6,
        sample_period: 0.5e-6,
    };

    #[test]
    fn noiseless_homogeneous_shot_is_the_closed_form() {
        let cfg = homogeneous_config(600.0, 0.0);
        let synth = ShotSynthesizer::new(&cfg, &SCHEDULE, 0).unwrap();
        let shot = synth.synthesize(3, 17);
        let t = &shot.truth;
        assert_eq!(t.n_atoms, t.n_upper + t.n_lower);
        assert_eq!(shot.trace.len(), SCHEDULE.len());
        let phi4 = t.n_upper as f64 * 2e-3;
        let phi3 = t.n_lower as f64 * 2e-3;
        for (y, &time) in shot.trace.iter().zip(&SCHEDULE.sample_times()) {
            let expect = two_segment_mean(&cfg.pumping, &SCHEDULE, phi4, phi3, time)
                .unwrap()
                .unwrap();
            assert!((y - expect).abs() <= 1e-15 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn empty_ensemble_gives_pure_noise() {
        let cfg = homogeneous_config(0.0, 3e-3);
        let synth = ShotSynthesizer::new(&cfg, &SCHEDULE, 0).unwrap();
        let mut all = Vec::new();
        for i in 0..200 {
            let s = synth.synthesize(i, i * 7 + 1);
            assert_eq!(s.truth.n_atoms, 0);
            all.extend(s.trace);
        }
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 5.0 * 3e-3 / n.sqrt());
        assert!((var / 9e-6 - 1.0).abs() < 5.0 * (2.0 / n).sqrt());
    }

    #[test]
    fn synthesis_is_deterministic() {
        let mut cfg = homogeneous_config(300.0, 1e-3);
        cfg.temperature = 100e-6;
        cfg.motion_enabled = true;
        let a = ShotSynthesizer::new(&cfg, &SCHEDULE, 4).unwrap().synthesize(1, 99);
        let b = ShotSynthesizer::new(&cfg, &SCHEDULE, 4).unwrap().synthesize(1, 99);
        assert_eq!(a, b);
        let c = synthesize_shot(&cfg, &SCHEDULE, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let d = synthesize_shot(&cfg, &SCHEDULE, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(c, d);
    }
}
