//! Pipeline configuration: a JSON document with units in the field names.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimation::FitOptions;
use crate::filter::FilterOptions;
use crate::physics::{BOLTZMANN, MICRO, MILLI, NANO};
use crate::probe::{
    EnsembleConfig, LoadingModel, Preparation, ProbeSchedule, PumpingModel, RamseyParams,
};
use crate::stats::RegressionWeighting;
use crate::trap::{CouplingProfile, OrbitBankSettings, TrapPotential};

pub const CONFIG_SCHEMA: &str = "qndsim-config/1";
/// Prefix of environment variables overriding configuration keys, e.g.
/// `QNDSIM_ENSEMBLE__TEMPERATURE_UK=120`.
pub const ENV_PREFIX: &str = "QNDSIM_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrapSection {
    pub depth_uk: f64,
    pub repulsive_decay_length_nm: f64,
    pub attractive_decay_length_nm: f64,
    pub minimum_position_nm: f64,
    pub surface_offset_nm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSection {
    /// Phase shift of one atom at rest in the trap minimum.
    pub peak_phase_per_atom_mrad: f64,
    pub probe_decay_length_nm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpingSection {
    pub beta: f64,
    pub tau_at_us: f64,
    pub tau_loss_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub mean_atom_number: f64,
    pub loading: LoadingModel,
    pub temperature_uk: f64,
    /// Detection noise per trace sample.
    pub phase_shot_noise_mrad: f64,
    pub motion_enabled: bool,
    pub preparation: Preparation,
    pub pulse_amplitude_error: f64,
    /// Scales the per-atom coupling.
    pub optical_depth_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSection {
    pub time_step_ns: f64,
    pub table_step_ns: f64,
    pub orbit_bank_size: usize,
    pub horizon_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub segment1_us: f64,
    pub gap_us: f64,
    pub segment2_us: f64,
    pub sample_period_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub include_pre_flip: bool,
    pub condition_warning: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RamseySection {
    pub eta0: f64,
    pub eta_inf: f64,
    pub tau_rec_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub atom_numbers: Vec<u64>,
    pub shots_per_group: usize,
    /// Allowed disagreement between groups in combined standard errors.
    pub agreement_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseScanSection {
    pub min_atoms: u64,
    pub max_atoms: u64,
    pub shots: usize,
    pub empty_shots: usize,
    pub bin_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceSection {
    /// Total phases of the atom groups; atom numbers follow from the mean
    /// coupling of the ensemble.
    pub phi_n_targets_rad: Vec<f64>,
    pub shots_per_group: usize,
    pub empty_shots: usize,
    pub weighting: RegressionWeighting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchedFilterSection {
    pub phi_n_rad: f64,
    pub condition_limit: f64,
    pub tikhonov_epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QndSection {
    pub phi_n_target_rad: f64,
    pub training_shots: usize,
    pub shots: usize,
    pub enhanced_optical_depth_multiplier: f64,
    pub enhanced_motion_enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: String,
    pub master_seed: u64,
    /// Shots written by `simulate`.
    pub shot_count: usize,
    pub output_dir: PathBuf,
    pub trap: TrapSection,
    pub coupling: CouplingSection,
    /// Response used to generate traces; estimators use the calibrated model.
    pub pumping: PumpingSection,
    pub ensemble: EnsembleSection,
    pub dynamics: DynamicsSection,
    /// Long schedule for population fits, noise scans and covariances.
    pub population_schedule: ScheduleSection,
    /// Short pre-measurement schedule for the QND protocol.
    pub qnd_schedule: ScheduleSection,
    pub fit: FitSection,
    pub ramsey: RamseySection,
    pub calibration: CalibrationSection,
    pub noise_scan: NoiseScanSection,
    pub covariance: CovarianceSection,
    pub matched_filter: MatchedFilterSection,
    pub qnd: QndSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA.into(),
            master_seed: 20_170_815,
            shot_count: 2000,
            output_dir: PathBuf::from("qndsim-out"),
            trap: TrapSection {
                depth_uk: 250.0,
                repulsive_decay_length_nm: 50.0,
                attractive_decay_length_nm: 1000.0,
                minimum_position_nm: 230.0,
                surface_offset_nm: 250.0,
            },
            coupling: CouplingSection { peak_phase_per_atom_mrad: 2.0, probe_decay_length_nm: 190.0 },
            pumping: PumpingSection { beta: 1.6, tau_at_us: 10.0, tau_loss_us: 400.0 },
            ensemble: EnsembleSection {
                mean_atom_number: 800.0,
                loading: LoadingModel::Poisson,
                temperature_uk: 90.0,
                phase_shot_noise_mrad: 4.41,
                motion_enabled: true,
                preparation: Preparation::HalfPi,
                pulse_amplitude_error: 0.0,
                optical_depth_multiplier: 1.0,
            },
            dynamics: DynamicsSection {
                time_step_ns: 2.5,
                table_step_ns: 25.0,
                orbit_bank_size: 4096,
                horizon_us: 400.0,
            },
            population_schedule: ScheduleSection {
                segment1_us: 60.0,
                gap_us: 40.0,
                segment2_us: 200.0,
                sample_period_us: 0.5,
            },
            qnd_schedule: ScheduleSection {
                segment1_us: 8.0,
                gap_us: 32.0,
                segment2_us: 120.0,
                sample_period_us: 0.5,
            },
            fit: FitSection { include_pre_flip: true, condition_warning: 1e6 },
            ramsey: RamseySection { eta0: 0.55, eta_inf: 0.63, tau_rec_us: 45.0 },
            calibration: CalibrationSection {
                atom_numbers: vec![200, 500, 1000],
                shots_per_group: 300,
                agreement_sigma: 3.0,
            },
            noise_scan: NoiseScanSection {
                min_atoms: 50,
                max_atoms: 1500,
                shots: 10_000,
                empty_shots: 2000,
                bin_size: 200,
            },
            covariance: CovarianceSection {
                phi_n_targets_rad: vec![0.32, 0.64, 0.96],
                shots_per_group: 2000,
                empty_shots: 10_000,
                weighting: RegressionWeighting::InverseVariance,
            },
            matched_filter: MatchedFilterSection {
                phi_n_rad: 0.64,
                condition_limit: 1e8,
                tikhonov_epsilon: 1e-10,
            },
            qnd: QndSection {
                phi_n_target_rad: 0.64,
                training_shots: 2000,
                shots: 2000,
                enhanced_optical_depth_multiplier: 3.0,
                enhanced_motion_enabled: false,
            },
        }
    }
}

impl PipelineConfig {
    /// Reads a configuration file and applies `QNDSIM_*` environment
    /// overrides from `env`.
    pub fn load(path: &Path, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_value(value, env)
    }

    /// Default configuration with environment overrides.
    pub fn from_defaults(env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let value = serde_json::to_value(Self::default())?;
        Self::from_value(value, env)
    }

    fn from_value(mut value: Value, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        overrides.sort();
        for (key, raw) in overrides {
            apply_override(&mut value, &key[ENV_PREFIX.len()..], &raw)?;
        }
        let cfg: Self =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "schema_version `{}` does not match this tool (`{CONFIG_SCHEMA}`)",
                self.schema_version
            )));
        }
        let wrap = |e: Error| Error::Config(e.to_string());
        self.trap_potential().map_err(wrap)?;
        self.coupling_profile().validate().map_err(wrap)?;
        self.pumping_model().validate().map_err(wrap)?;
        self.population_schedule().validate().map_err(wrap)?;
        self.qnd_schedule().validate().map_err(wrap)?;
        self.ramsey_params().validate().map_err(wrap)?;
        self.ensemble_config().map_err(wrap)?.validate().map_err(wrap)?;
        let positive = [
            ("ensemble.optical_depth_multiplier", self.ensemble.optical_depth_multiplier),
            ("dynamics.time_step_ns", self.dynamics.time_step_ns),
            ("dynamics.table_step_ns", self.dynamics.table_step_ns),
            ("dynamics.horizon_us", self.dynamics.horizon_us),
            ("matched_filter.phi_n_rad", self.matched_filter.phi_n_rad),
            ("qnd.phi_n_target_rad", self.qnd.phi_n_target_rad),
            ("qnd.enhanced_optical_depth_multiplier", self.qnd.enhanced_optical_depth_multiplier),
            ("calibration.agreement_sigma", self.calibration.agreement_sigma),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.population_schedule.sample_period_us != self.qnd_schedule.sample_period_us {
            return Err(Error::Config(
                "population and QND schedules must share one sample period".into(),
            ));
        }
        if self.dynamics.orbit_bank_size == 0 {
            return Err(Error::Config("dynamics.orbit_bank_size must be positive".into()));
        }
        if self.calibration.atom_numbers.len() < 3 {
            return Err(Error::Config("calibration needs at least 3 atom-number groups".into()));
        }
        if self.covariance.phi_n_targets_rad.len() < 2
            || self.covariance.phi_n_targets_rad.iter().any(|p| !(*p > 0.0))
        {
            return Err(Error::Config(
                "covariance needs at least 2 positive phi_N targets".into(),
            ));
        }
        if self.noise_scan.min_atoms > self.noise_scan.max_atoms {
            return Err(Error::Config("noise_scan.min_atoms exceeds max_atoms".into()));
        }
        if self.noise_scan.bin_size < 3 || self.noise_scan.shots < 3 * self.noise_scan.bin_size {
            return Err(Error::Config("noise_scan needs at least 3 bins of ≥ 3 shots".into()));
        }
        if self.qnd.shots < crate::filter::MIN_PAIRS || self.qnd.training_shots < 2 {
            return Err(Error::Config(format!(
                "qnd needs ≥ {} shots and ≥ 2 training shots",
                crate::filter::MIN_PAIRS
            )));
        }
        if self.calibration.shots_per_group == 0
            || self.covariance.shots_per_group < 2
            || self.covariance.empty_shots < 2
            || self.noise_scan.empty_shots < 3
        {
            return Err(Error::Config("shot counts too small".into()));
        }
        Ok(())
    }

    /// Canonical JSON (keys in declaration order, no whitespace).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("configuration serialises")
    }

    /// The configuration with the output location cleared. Artifacts embed
    /// this form, so a run reproduces byte for byte in any directory.
    pub fn relocatable(&self) -> Self {
        Self { output_dir: PathBuf::new(), ..self.clone() }
    }

    /// SHA-256 of the canonical JSON of [`Self::relocatable`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.relocatable().canonical_json().as_bytes()).as_slice())
    }

    pub fn trap_potential(&self) -> Result<TrapPotential> {
        let t = &self.trap;
        TrapPotential::from_depth(
            BOLTZMANN * t.depth_uk * MICRO,
            t.repulsive_decay_length_nm * NANO,
            t.attractive_decay_length_nm * NANO,
            t.minimum_position_nm * NANO,
            t.surface_offset_nm * NANO,
        )
    }

    /// Coupling profile without the optical-depth multiplier.
    pub fn coupling_profile(&self) -> CouplingProfile {
        CouplingProfile {
            peak_phase_per_atom: self.coupling.peak_phase_per_atom_mrad * MILLI,
            probe_decay_length: self.coupling.probe_decay_length_nm * NANO,
            reference_position: self.trap.minimum_position_nm * NANO,
        }
    }

    pub fn pumping_model(&self) -> PumpingModel {
        PumpingModel {
            beta: self.pumping.beta,
            tau_at: self.pumping.tau_at_us * MICRO,
            tau_loss: self.pumping.tau_loss_us * MICRO,
        }
    }

    pub fn orbit_bank_settings(&self) -> OrbitBankSettings {
        OrbitBankSettings {
            size: self.dynamics.orbit_bank_size,
            time_step: self.dynamics.time_step_ns * NANO,
            table_step: self.dynamics.table_step_ns * NANO,
            horizon: self.dynamics.horizon_us * MICRO,
        }
    }

    pub fn ensemble_config(&self) -> Result<EnsembleConfig> {
        let e = &self.ensemble;
        Ok(EnsembleConfig {
            mean_atom_number: e.mean_atom_number,
            loading: e.loading,
            temperature: e.temperature_uk * MICRO,
            phase_shot_noise: e.phase_shot_noise_mrad * MILLI,
            trap: self.trap_potential()?,
            coupling: self.coupling_profile().scaled(e.optical_depth_multiplier),
            pumping: self.pumping_model(),
            motion_enabled: e.motion_enabled,
            preparation: e.preparation,
            pulse_amplitude_error: e.pulse_amplitude_error,
            orbit_bank: self.orbit_bank_settings(),
        })
    }

    pub fn population_schedule(&self) -> ProbeSchedule {
        schedule(&self.population_schedule)
    }

    pub fn qnd_schedule(&self) -> ProbeSchedule {
        schedule(&self.qnd_schedule)
    }

    pub fn ramsey_params(&self) -> RamseyParams {
        RamseyParams {
            eta0: self.ramsey.eta0,
            eta_inf: self.ramsey.eta_inf,
            tau_rec: self.ramsey.tau_rec_us * MICRO,
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            include_pre_flip: self.fit.include_pre_flip,
            condition_warning: self.fit.condition_warning,
            weight: None,
        }
    }

    pub fn filter_options(&self) -> FilterOptions {
        FilterOptions {
            condition_limit: self.matched_filter.condition_limit,
            tikhonov_epsilon: self.matched_filter.tikhonov_epsilon,
        }
    }
}

fn schedule(s: &ScheduleSection) -> ProbeSchedule {
    ProbeSchedule {
        segment1_duration: s.segment1_us * MICRO,
        gap_duration: s.gap_us * MICRO,
        segment2_duration: s.segment2_us * MICRO,
        sample_period: s.sample_period_us * MICRO,
    }
}

/// Sets the key addressed by `path` (sections separated by `__`, matched
/// case-insensitively) to `raw`, parsed as JSON when possible and as a
/// string otherwise.
fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let keys: Vec<String> = path.split("__").map(|k| k.to_ascii_lowercase()).collect();
    let mut node = root;
    for (depth, key) in keys.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override {ENV_PREFIX}{path}: `{}` is not a section", keys[..depth].join(".")))
        })?;
        let slot = obj
            .get_mut(key.as_str())
            .ok_or_else(|| Error::Config(format!("override {ENV_PREFIX}{path}: unknown key `{key}`")))?;
        node = slot;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let back: PipelineConfig = serde_json::from_str(&cfg.canonical_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn env_overrides_apply_and_change_the_hash() {
        let env = vec![
            ("QNDSIM_ENSEMBLE__TEMPERATURE_UK".to_string(), "120".to_string()),
            ("QNDSIM_MASTER_SEED".to_string(), "7".to_string()),
            ("QNDSIM_ENSEMBLE__LOADING".to_string(), r#"{"kind":"fixed"}"#.to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let cfg = PipelineConfig::from_defaults(env).unwrap();
        assert_eq!(cfg.ensemble.temperature_uk, 120.0);
        assert_eq!(cfg.master_seed, 7);
        assert_eq!(cfg.ensemble.loading, LoadingModel::Fixed);
        assert_ne!(cfg.hash(), PipelineConfig::default().hash());
    }

    #[test]
    fn bad_overrides_and_schemas_are_config_errors() {
        let unknown = vec![("QNDSIM_ENSEMBLE__NOPE".to_string(), "1".to_string())];
        assert!(matches!(PipelineConfig::from_defaults(unknown), Err(Error::Config(_))));
        let wrong_type = vec![("QNDSIM_MASTER_SEED".to_string(), "abc".to_string())];
        assert!(matches!(PipelineConfig::from_defaults(wrong_type), Err(Error::Config(_))));
        let schema = vec![("QNDSIM_SCHEMA_VERSION".to_string(), "qndsim-config/0".to_string())];
        assert!(matches!(PipelineConfig::from_defaults(schema), Err(Error::Config(_))));
        let grid = vec![("QNDSIM_QND_SCHEDULE__SEGMENT1_US".to_string(), "8.2".to_string())];
        assert!(matches!(PipelineConfig::from_defaults(grid), Err(Error::Config(_))));
    }
}
