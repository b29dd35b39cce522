//! Pipeline stages and the files they exchange.
//!
//! | stage            | reads                                     | writes |
//! |------------------|-------------------------------------------|--------|
//! | `calibrate`      |                                           | `pumping_model.json`, `calibration_groups.csv`, `calibration_traces.csv` |
//! | `simulate`       |                                           | `traces.csv`, `shots.jsonl` |
//! | `fit`            | `pumping_model.json`, `traces.csv`, `shots.jsonl` | `estimates.csv` |
//! | `noise-scan`     | `pumping_model.json`                      | `noise_scan_bins.csv`, `noise_scan_fit.json` |
//! | `covariance`     | `pumping_model.json`                      | `covariance_c{0,1}.{bin,csv}`, `covariance_diagonal.csv`, `correlation_curve.csv`, `covariance_groups.csv`, `covariance_summary.json` |
//! | `matched-filter` | `pumping_model.json`, `covariance_c{0,1}` | `matched_filter_mode.csv`, `matched_filter.json` |
//! | `qnd`            | `pumping_model.json`                      | `qnd_pairs.csv`, `qnd_filter_modes.csv`, `qnd_verdict.json` |

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::calibrate::{calibrate, simulate_groups, Calibration};
use super::config::PipelineConfig;
use super::io::{self, CsvTable};
use super::manifest::{ManifestEntry, RunManifest};
use crate::error::{Error, Result};
use crate::estimation::{segment_fluctuations, EstimatePair, TraceBasis};
use crate::filter::{build_signal, optimal_mode_with, snr, ConditionalVariance, SqueezingVerdict};
use crate::lsq::weighted_linear;
use crate::probe::{EnsembleConfig, LoadingModel, ProbeSchedule, ShotSynthesizer};
use crate::qnd::{qnd_protocol, QndSettings};
use crate::rng::{derive_seed, Domain};
use crate::stats::{
    bin_shots, correlation_curve, decompose_covariance, estimate_covariance, noise_level_db,
    scaling_fit, scaling_fit_on, variance_with_jackknife, CovarianceGroup, ScalingFit,
};
use crate::trap::OrbitBank;

pub const PUMPING_MODEL: &str = "pumping_model.json";
pub const TRACES: &str = "traces.csv";
pub const SHOTS: &str = "shots.jsonl";
pub const C0_BIN: &str = "covariance_c0.bin";
pub const C1_BIN: &str = "covariance_c1.bin";
pub const C0_CSV: &str = "covariance_c0.csv";
pub const C1_CSV: &str = "covariance_c1.csv";

fn schema(kind: &str) -> String {
    format!("qndsim/{kind}/1")
}

/// Offset separating detector-only shots from atom shots within a domain.
const EMPTY_BLOCK: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Calibrate,
    Simulate,
    Fit,
    NoiseScan,
    Covariance,
    MatchedFilter,
    Qnd,
    All,
}

impl Stage {
    pub const SEQUENCE: [Stage; 7] = [
        Stage::Calibrate,
        Stage::Simulate,
        Stage::Fit,
        Stage::NoiseScan,
        Stage::Covariance,
        Stage::MatchedFilter,
        Stage::Qnd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Calibrate => "calibrate",
            Stage::Simulate => "simulate",
            Stage::Fit => "fit",
            Stage::NoiseScan => "noise-scan",
            Stage::Covariance => "covariance",
            Stage::MatchedFilter => "matched-filter",
            Stage::Qnd => "qnd",
            Stage::All => "all",
        }
    }

    fn expand(self) -> Vec<Stage> {
        match self {
            Stage::All => Self::SEQUENCE.to_vec(),
            s => vec![s],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::SEQUENCE
            .iter()
            .chain(std::iter::once(&Stage::All))
            .find(|st| st.name() == s)
            .copied()
            .ok_or_else(|| Error::UnknownStage(s.to_string()))
    }
}

/// Runs stages for one validated configuration, caching orbit banks
/// between stages.
pub struct Pipeline {
    cfg: PipelineConfig,
    hash: String,
    out_dir: PathBuf,
    banks: Mutex<HashMap<u64, Arc<OrbitBank>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ShotSidecar {
    shot_id: u64,
    seed: u64,
    n_atoms: u64,
    n_upper: u64,
    n_lower: u64,
    upper_coupling_sum: f64,
    lower_coupling_sum: f64,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            hash: cfg.hash(),
            out_dir: cfg.output_dir.clone(),
            cfg,
            banks: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    /// Runs `stage` (all stages in order for [`Stage::All`]) and updates the
    /// manifest after each one.
    pub fn run(&self, stage: Stage) -> Result<RunManifest> {
        std::fs::create_dir_all(&self.out_dir)?;
        let mut text = serde_json::to_string_pretty(&self.cfg)?;
        text.push('\n');
        std::fs::write(self.out_dir.join("config.json"), text)?;
        let mut manifest = RunManifest::load_or_new(&self.out_dir, &self.hash)?;
        for s in stage.expand() {
            let start = Instant::now();
            let entries = self.run_one(s)?;
            manifest.record(s.name(), entries, start.elapsed().as_secs_f64());
            manifest.write(&self.out_dir)?;
        }
        Ok(manifest)
    }

    fn run_one(&self, stage: Stage) -> Result<Vec<ManifestEntry>> {
        let written = match stage {
            Stage::Calibrate => self.calibrate()?,
            Stage::Simulate => self.simulate()?,
            Stage::Fit => self.fit()?,
            Stage::NoiseScan => self.noise_scan()?,
            Stage::Covariance => self.covariance()?,
            Stage::MatchedFilter => self.matched_filter()?,
            Stage::Qnd => self.qnd()?,
            Stage::All => unreachable!("expanded by run"),
        };
        written
            .into_iter()
            .map(|(name, schema)| ManifestEntry::describe(&self.out_dir, name, &schema))
            .collect()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Orbit bank for an ensemble, `None` when it is homogeneous. Banks
    /// differ only through the coupling scale, so they are cached by it.
    fn bank_for(&self, ens: &EnsembleConfig) -> Result<Option<Arc<OrbitBank>>> {
        if ens.is_homogeneous() {
            return Ok(None);
        }
        let key = ens.coupling.peak_phase_per_atom.to_bits();
        let mut banks = self.banks.lock().expect("bank cache poisoned");
        if let Some(b) = banks.get(&key) {
            return Ok(Some(b.clone()));
        }
        let bank = Arc::new(OrbitBank::build(
            &ens.trap,
            &ens.coupling,
            ens.temperature,
            &ens.orbit_bank,
            derive_seed(self.cfg.master_seed, Domain::OrbitBank, 0),
        )?);
        banks.insert(key, bank.clone());
        Ok(Some(bank))
    }

    /// Mean time-averaged coupling per atom.
    fn mean_coupling(&self, ens: &EnsembleConfig, bank: &Option<Arc<OrbitBank>>) -> f64 {
        match bank {
            Some(b) => b.orbits.iter().map(|o| o.mean_coupling).sum::<f64>() / b.len() as f64,
            None => ens.coupling.at(ens.coupling.reference_position),
        }
    }

    fn atoms_for_phase(&self, target: f64, per_atom: f64) -> Result<u64> {
        if !(per_atom > 0.0) {
            return Err(Error::Numeric("mean coupling per atom is zero".into()));
        }
        Ok((target / per_atom).round().max(1.0) as u64)
    }

    fn load_calibration(&self) -> Result<Calibration> {
        io::read_json(&self.path(PUMPING_MODEL), &schema("pumping-model"), &self.hash)
    }

    fn batch<T, F>(&self, ens: &EnsembleConfig, schedule: &ProbeSchedule, seeds: Vec<(u64, u64)>, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(crate::probe::ShotRecord) -> Result<T> + Sync,
    {
        let bank = self.bank_for(ens)?;
        let synth = ShotSynthesizer::with_bank(ens, schedule, bank)?;
        seeds.into_par_iter().map(|(id, seed)| f(synth.synthesize(id, seed))).collect()
    }

    fn calibrate(&self) -> Result<Vec<(&'static str, String)>> {
        let c = &self.cfg.calibration;
        let ens = self.cfg.ensemble_config()?;
        let schedule = self.cfg.population_schedule();
        let bank = self.bank_for(&ens)?;
        let groups =
            simulate_groups(&ens, &schedule, bank, &c.atom_numbers, c.shots_per_group, self.cfg.master_seed)?;
        let cal = calibrate(&groups, c.agreement_sigma)?;
        io::write_json(&self.path(PUMPING_MODEL), &schema("pumping-model"), &self.hash, &cal)?;
        io::write_csv(
            &self.path("calibration_groups.csv"),
            &schema("calibration-groups"),
            &self.hash,
            &[
                "atom_number", "n_shots", "amplitude_rad", "amplitude_se", "beta", "beta_se",
                "tau_at_us", "tau_at_us_se", "tau_loss_us", "tau_loss_us_se", "rms_residual_rad",
            ],
            cal.groups.iter().zip(&groups).map(|(f, g)| {
                vec![
                    f.atom_number.to_string(),
                    g.n_shots.to_string(),
                    f.amplitude.to_string(),
                    f.amplitude_se.to_string(),
                    f.beta.to_string(),
                    f.beta_se.to_string(),
                    f.tau_at_us.to_string(),
                    f.tau_at_us_se.to_string(),
                    f.tau_loss_us.to_string(),
                    f.tau_loss_us_se.to_string(),
                    f.rms_residual.to_string(),
                ]
            }),
        )?;
        let mut columns = vec!["t_us".to_string()];
        columns.extend(groups.iter().map(|g| format!("mean_phase_n{}", g.atom_number)));
        let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
        io::write_csv(
            &self.path("calibration_traces.csv"),
            &schema("calibration-traces"),
            &self.hash,
            &cols,
            (0..groups[0].times.len()).map(|k| {
                std::iter::once((groups[0].times[k] * 1e6).to_string())
                    .chain(groups.iter().map(move |g| g.mean_trace[k].to_string()))
                    .collect::<Vec<_>>()
            }),
        )?;
        Ok(vec![
            (PUMPING_MODEL, schema("pumping-model")),
            ("calibration_groups.csv", schema("calibration-groups")),
            ("calibration_traces.csv", schema("calibration-traces")),
        ])
    }

    fn time_columns(schedule: &ProbeSchedule) -> Vec<String> {
        let sp = schedule.sample_period * 1e6;
        let flip = schedule.t_flip() * 1e6;
        (0..schedule.segment1_samples())
            .map(|i| i as f64 * sp)
            .chain((0..schedule.segment2_samples()).map(|i| flip + i as f64 * sp))
            .map(|t| format!("t{t:.4}us"))
            .collect()
    }

    fn simulate(&self) -> Result<Vec<(&'static str, String)>> {
        let ens = self.cfg.ensemble_config()?;
        let schedule = self.cfg.population_schedule();
        let seeds = (0..self.cfg.shot_count as u64)
            .map(|i| (i, derive_seed(self.cfg.master_seed, Domain::Shot, i)))
            .collect();
        let shots = self.batch(&ens, &schedule, seeds, Ok)?;
        let mut columns = vec!["shot_id".to_string()];
        columns.extend(Self::time_columns(&schedule));
        let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
        io::write_csv(
            &self.path(TRACES),
            &schema("traces"),
            &self.hash,
            &cols,
            shots.iter().map(|s| {
                std::iter::once(s.shot_id.to_string())
                    .chain(s.trace.iter().map(f64::to_string))
                    .collect::<Vec<_>>()
            }),
        )?;
        let sidecar: Vec<ShotSidecar> = shots
            .iter()
            .map(|s| ShotSidecar {
                shot_id: s.shot_id,
                seed: s.seed,
                n_atoms: s.truth.n_atoms,
                n_upper: s.truth.n_upper,
                n_lower: s.truth.n_lower,
                upper_coupling_sum: s.truth.upper_coupling_sum(),
                lower_coupling_sum: s.truth.lower_coupling_sum(),
            })
            .collect();
        io::write_jsonl(&self.path(SHOTS), &schema("shots"), &self.hash, &self.cfg.relocatable(), &sidecar)?;
        Ok(vec![(TRACES, schema("traces")), (SHOTS, schema("shots"))])
    }

    fn fit(&self) -> Result<Vec<(&'static str, String)>> {
        let cal = self.load_calibration()?;
        let table = io::read_csv(&self.path(TRACES), &schema("traces"), &self.hash)?;
        let sidecar: Vec<ShotSidecar> = io::read_jsonl(&self.path(SHOTS), &schema("shots"), &self.hash)?;
        let schedule = self.cfg.population_schedule();
        if table.columns.len() != schedule.len() + 1 {
            return Err(Error::StaleInput {
                path: self.path(TRACES),
                reason: format!("{} samples per shot, expected {}", table.columns.len() - 1, schedule.len()),
            });
        }
        if sidecar.len() != table.rows.len() {
            return Err(Error::StaleInput {
                path: self.path(SHOTS),
                reason: format!("{} sidecar records for {} traces", sidecar.len(), table.rows.len()),
            });
        }
        let basis = TraceBasis::new(&schedule, &cal.model(), &self.cfg.fit_options())?;
        let fits: Vec<(u64, EstimatePair)> = table
            .rows
            .par_iter()
            .map(|row| {
                let id: u64 = row[0]
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad shot id `{}`", row[0])))?;
                let trace = row[1..].iter().map(|c| CsvTable::parse_f64(c)).collect::<Result<Vec<_>>>()?;
                Ok((id, basis.fit(&trace)?))
            })
            .collect::<Result<_>>()?;
        io::write_csv(
            &self.path("estimates.csv"),
            &schema("estimates"),
            &self.hash,
            &[
                "shot_id", "phi4", "phi3", "phi_N", "phi_Delta", "residual", "condition",
                "ill_conditioned", "n_atoms", "true_upper_phase", "true_lower_phase",
            ],
            fits.iter().zip(&sidecar).map(|((id, e), s)| {
                vec![
                    id.to_string(),
                    e.phi4.to_string(),
                    e.phi3.to_string(),
                    e.phi_n.to_string(),
                    e.phi_delta.to_string(),
                    e.fit_residual_rms.to_string(),
                    e.gram_condition.to_string(),
                    e.ill_conditioned.to_string(),
                    s.n_atoms.to_string(),
                    s.upper_coupling_sum.to_string(),
                    s.lower_coupling_sum.to_string(),
                ]
            }),
        )?;
        Ok(vec![("estimates.csv", schema("estimates"))])
    }

    fn noise_scan(&self) -> Result<Vec<(&'static str, String)>> {
        let cal = self.load_calibration()?;
        let ns = &self.cfg.noise_scan;
        let base = self.cfg.ensemble_config()?;
        let schedule = self.cfg.population_schedule();
        let basis = TraceBasis::new(&schedule, &cal.model(), &self.cfg.fit_options())?;
        let master = self.cfg.master_seed;
        let scan = EnsembleConfig {
            loading: LoadingModel::Uniform { min: ns.min_atoms, max: ns.max_atoms },
            ..base
        };
        let seeds = (0..ns.shots as u64).map(|i| (i, derive_seed(master, Domain::NoiseScan, i))).collect();
        let estimates = self.batch(&scan, &schedule, seeds, |s| basis.fit(&s.trace))?;
        let empty = EnsembleConfig { mean_atom_number: 0.0, loading: LoadingModel::Fixed, ..base };
        let seeds = (0..ns.empty_shots as u64)
            .map(|i| (i, derive_seed(master, Domain::NoiseScan, EMPTY_BLOCK | i)))
            .collect();
        let empty_delta = self.batch(&empty, &schedule, seeds, |s| Ok(basis.fit(&s.trace)?.phi_delta))?;

        let (shot_noise, shot_noise_se) = variance_with_jackknife(&empty_delta)?;
        let analytic = basis.delta_noise_variance(base.phase_shot_noise);
        let bins = bin_shots(&estimates, ns.bin_size)?;
        let fit = scaling_fit(&bins)?;
        let upper = scaling_fit_on(&bins, |b| b.var_upper)?;
        let levels = bins
            .iter()
            .map(|b| noise_level_db(b.var_delta, shot_noise))
            .collect::<Result<Vec<_>>>()?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        io::write_csv(
            &self.path("noise_scan_bins.csv"),
            &schema("noise-scan-bins"),
            &self.hash,
            &[
                "n_shots", "mean_phi_total_rad", "var_diff_rad2", "var_diff_err", "var_upper_rad2",
                "var_upper_err", "var_lower_rad2", "var_lower_err", "effective_atom_number",
                "noise_above_floor_db",
            ],
            bins.iter().zip(&levels).map(|(b, db)| {
                vec![
                    b.n_shots.to_string(),
                    b.mean_phi_n.to_string(),
                    b.var_delta.to_string(),
                    b.var_delta_err.to_string(),
                    b.var_upper.to_string(),
                    b.var_upper_err.to_string(),
                    b.var_lower.to_string(),
                    b.var_lower_err.to_string(),
                    (b.mean_phi_n / fit.slope).to_string(),
                    opt(*db),
                ]
            }),
        )?;
        #[derive(Serialize)]
        struct Summary {
            fit: ScalingFit,
            upper_fit: ScalingFit,
            diff_to_upper_slope_ratio: f64,
            shot_noise_rad2: f64,
            shot_noise_se_rad2: f64,
            shot_noise_analytic_rad2: f64,
            top_bin_db: Option<f64>,
            n_shots: usize,
            n_empty_shots: usize,
        }
        let summary = Summary {
            fit,
            upper_fit: upper,
            diff_to_upper_slope_ratio: fit.slope / upper.slope,
            shot_noise_rad2: shot_noise,
            shot_noise_se_rad2: shot_noise_se,
            shot_noise_analytic_rad2: analytic,
            top_bin_db: *levels.last().expect("at least three bins"),
            n_shots: ns.shots,
            n_empty_shots: ns.empty_shots,
        };
        io::write_json(&self.path("noise_scan_fit.json"), &schema("noise-scan-fit"), &self.hash, &summary)?;
        Ok(vec![
            ("noise_scan_bins.csv", schema("noise-scan-bins")),
            ("noise_scan_fit.json", schema("noise-scan-fit")),
        ])
    }

    fn covariance(&self) -> Result<Vec<(&'static str, String)>> {
        let cal = self.load_calibration()?;
        let model = cal.model();
        let cv = &self.cfg.covariance;
        let base = self.cfg.ensemble_config()?;
        let schedule = self.cfg.population_schedule();
        let basis = TraceBasis::new(&schedule, &model, &self.cfg.fit_options())?;
        let bank = self.bank_for(&base)?;
        let per_atom = self.mean_coupling(&base, &bank);
        let master = self.cfg.master_seed;

        struct GroupStats {
            atom_number: u64,
            group: CovarianceGroup,
            var_delta: f64,
            var_delta_err: f64,
        }
        let mut plan: Vec<(u64, usize, u64)> = vec![(0, cv.empty_shots, EMPTY_BLOCK)];
        for (g, &target) in cv.phi_n_targets_rad.iter().enumerate() {
            plan.push((self.atoms_for_phase(target, per_atom)?, cv.shots_per_group, (g as u64) << 32));
        }
        let mut stats = Vec::new();
        for (atoms, shots, block) in plan {
            let ens = EnsembleConfig { mean_atom_number: atoms as f64, loading: LoadingModel::Fixed, ..base };
            let seeds = (0..shots as u64)
                .map(|i| (i, derive_seed(master, Domain::Covariance, block | i)))
                .collect();
            let rows = self.batch(&ens, &schedule, seeds, |s| {
                let e = basis.fit(&s.trace)?;
                Ok((e, segment_fluctuations(&s, &model, e.phi_n)?))
            })?;
            let phi_n = rows.iter().map(|(e, _)| e.phi_n).sum::<f64>() / rows.len() as f64;
            let deltas: Vec<f64> = rows.iter().map(|(e, _)| e.phi_delta).collect();
            let (var_delta, var_delta_err) = variance_with_jackknife(&deltas)?;
            let series: Vec<Vec<f64>> = rows.into_iter().map(|(_, d)| d).collect();
            stats.push(GroupStats {
                atom_number: atoms,
                group: CovarianceGroup { phi_n, covariance: estimate_covariance(&series)?, n_shots: shots },
                var_delta,
                var_delta_err,
            });
        }
        let groups: Vec<CovarianceGroup> = stats.iter().map(|s| s.group.clone()).collect();
        let dec = decompose_covariance(&groups, cv.weighting)?;

        // φ_eff,1 from the growth of var(φ_Δ) with φ_N across the groups
        let design = DMatrix::from_fn(stats.len(), 2, |i, j| if j == 0 { 1.0 } else { stats[i].group.phi_n });
        let y: Vec<f64> = stats.iter().map(|s| s.var_delta).collect();
        let w: Vec<f64> = stats.iter().map(|s| s.var_delta_err.powi(-2)).collect();
        let slope_fit = weighted_linear(&design, &y, &w)?;
        let phase_per_atom = slope_fit.coefficients[1];

        let times = &schedule.sample_times()[..schedule.segment1_samples()];
        let response: Vec<f64> = times.iter().map(|&t| model.eval(t)).collect();
        let c1_diag: Vec<f64> = dec.c1.diagonal().iter().copied().collect();
        let c1_model: Vec<f64> = response.iter().map(|m| phase_per_atom * m * m / 4.0).collect();
        if c1_diag.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Numeric("atomic covariance has a non-positive diagonal".into()));
        }
        let curve = correlation_curve(&dec.c1, &c1_diag, schedule.sample_period)?;
        let ratios: Vec<f64> = c1_diag.iter().zip(&c1_model).map(|(d, m)| d / m).collect();
        let n = dec.c0.nrows();
        let c0_rho_mean_abs = {
            let d = dec.c0.diagonal();
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        acc += (dec.c0[(i, j)] / (d[i] * d[j]).sqrt()).abs();
                    }
                }
            }
            acc / (n * (n - 1)).max(1) as f64
        };

        let h = &self.hash;
        io::write_matrix_bin(&self.path(C0_BIN), &dec.c0)?;
        io::write_matrix_bin(&self.path(C1_BIN), &dec.c1)?;
        io::write_matrix_csv(&self.path(C0_CSV), &schema("covariance-c0"), h, &dec.c0)?;
        io::write_matrix_csv(&self.path(C1_CSV), &schema("covariance-c1"), h, &dec.c1)?;
        io::write_csv(
            &self.path("covariance_diagonal.csv"),
            &schema("covariance-diagonal"),
            h,
            &["t_us", "c0_diag_rad2", "c1_diag_rad", "c1_diag_model_rad", "c1_diag_ratio"],
            (0..n).map(|i| {
                vec![
                    (times[i] * 1e6).to_string(),
                    dec.c0[(i, i)].to_string(),
                    c1_diag[i].to_string(),
                    c1_model[i].to_string(),
                    ratios[i].to_string(),
                ]
            }),
        )?;
        io::write_csv(
            &self.path("correlation_curve.csv"),
            &schema("correlation-curve"),
            h,
            &["lag_us", "correlation", "damped_cosine_fit"],
            curve.lag.iter().zip(&curve.rho).map(|(lag, rho)| {
                vec![
                    (lag * 1e6).to_string(),
                    rho.to_string(),
                    curve.oscillation.map_or_else(String::new, |o| o.eval(*lag).to_string()),
                ]
            }),
        )?;
        io::write_csv(
            &self.path("covariance_groups.csv"),
            &schema("covariance-groups"),
            h,
            &["atom_number", "n_shots", "mean_phi_total_rad", "var_diff_rad2", "var_diff_err"],
            stats.iter().map(|s| {
                vec![
                    s.atom_number.to_string(),
                    s.group.n_shots.to_string(),
                    s.group.phi_n.to_string(),
                    s.var_delta.to_string(),
                    s.var_delta_err.to_string(),
                ]
            }),
        )?;
        #[derive(Serialize)]
        struct Oscillation {
            period_us: f64,
            damping_time_us: f64,
            amplitude: f64,
            offset: f64,
            rms_residual: f64,
        }
        #[derive(Serialize)]
        struct Summary {
            mean_coupling_per_atom_rad: f64,
            phase_per_atom_rad: f64,
            phase_per_atom_se_rad: f64,
            shot_noise_level_rad2: f64,
            c0_offdiag_mean_abs_correlation: f64,
            c1_diag_ratio_mean: f64,
            c1_diag_ratio_min: f64,
            c1_diag_ratio_max: f64,
            residual_quadratic_norm: Option<f64>,
            min_relative_eigenvalue: f64,
            oscillation: Option<Oscillation>,
        }
        let mean_ratio = ratios.iter().sum::<f64>() / n as f64;
        let summary = Summary {
            mean_coupling_per_atom_rad: per_atom,
            phase_per_atom_rad: phase_per_atom,
            phase_per_atom_se_rad: slope_fit.standard_error(1),
            shot_noise_level_rad2: dec.shot_noise_level,
            c0_offdiag_mean_abs_correlation: c0_rho_mean_abs,
            c1_diag_ratio_mean: mean_ratio,
            c1_diag_ratio_min: ratios.iter().copied().fold(f64::INFINITY, f64::min),
            c1_diag_ratio_max: ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            residual_quadratic_norm: dec.residual_quadratic_norm,
            min_relative_eigenvalue: dec.min_relative_eigenvalue,
            oscillation: curve.oscillation.map(|o| Oscillation {
                period_us: o.period * 1e6,
                damping_time_us: o.damping_time * 1e6,
                amplitude: o.amplitude,
                offset: o.offset,
                rms_residual: o.rms_residual,
            }),
        };
        io::write_json(&self.path("covariance_summary.json"), &schema("covariance-summary"), h, &summary)?;
        Ok(vec![
            (C0_BIN, "qndsim/matrix-f64le/1".into()),
            (C1_BIN, "qndsim/matrix-f64le/1".into()),
            (C0_CSV, schema("covariance-c0")),
            (C1_CSV, schema("covariance-c1")),
            ("covariance_diagonal.csv", schema("covariance-diagonal")),
            ("correlation_curve.csv", schema("correlation-curve")),
            ("covariance_groups.csv", schema("covariance-groups")),
            ("covariance_summary.json", schema("covariance-summary")),
        ])
    }

    fn load_matrix(&self, bin: &str, csv: &str, kind: &str) -> Result<DMatrix<f64>> {
        let m = io::read_matrix_csv(&self.path(csv), &schema(kind), &self.hash)?;
        let b = io::read_matrix_bin(&self.path(bin))?;
        if b != m {
            return Err(Error::StaleInput {
                path: self.path(bin),
                reason: format!("binary matrix disagrees with {csv}"),
            });
        }
        Ok(m)
    }

    fn matched_filter(&self) -> Result<Vec<(&'static str, String)>> {
        let cal = self.load_calibration()?;
        let model = cal.model();
        let c0 = self.load_matrix(C0_BIN, C0_CSV, "covariance-c0")?;
        let c1 = self.load_matrix(C1_BIN, C1_CSV, "covariance-c1")?;
        let schedule = self.cfg.population_schedule();
        let n = schedule.segment1_samples();
        if c0.shape() != (n, n) || c1.shape() != (n, n) {
            return Err(Error::StaleInput {
                path: self.path(C0_CSV),
                reason: format!("covariance is {:?}, expected {n}×{n}", c0.shape()),
            });
        }
        let phi_n = self.cfg.matched_filter.phi_n_rad;
        let c = &c0 + &c1 * phi_n;
        let times = &schedule.sample_times()[..n];
        let signal = build_signal(phi_n, &model, &self.cfg.ramsey_params(), times)?;
        let result = optimal_mode_with(&c, &signal, &self.cfg.filter_options())?;
        let uniform = vec![1.0 / (n as f64).sqrt(); n];
        let norm = signal.samples.iter().map(|s| s * s).sum::<f64>().sqrt();
        let shaped: Vec<f64> = signal.samples.iter().map(|s| s / norm).collect();
        io::write_csv(
            &self.path("matched_filter_mode.csv"),
            &schema("matched-filter-mode"),
            &self.hash,
            &["t_us", "q_opt", "signal_rad", "covariance_diag_rad2"],
            (0..n).map(|i| {
                vec![
                    (times[i] * 1e6).to_string(),
                    result.q_opt[i].to_string(),
                    signal.samples[i].to_string(),
                    c[(i, i)].to_string(),
                ]
            }),
        )?;
        #[derive(Serialize)]
        struct Summary {
            phi_total_rad: f64,
            snr_optimal: f64,
            snr_uniform: f64,
            snr_signal_shaped: f64,
            condition_used: f64,
            regularization_rad2: f64,
        }
        let summary = Summary {
            phi_total_rad: phi_n,
            snr_optimal: result.snr,
            snr_uniform: snr(&uniform, &signal, &c)?,
            snr_signal_shaped: snr(&shaped, &signal, &c)?,
            condition_used: result.condition_used,
            regularization_rad2: result.regularization,
        };
        io::write_json(&self.path("matched_filter.json"), &schema("matched-filter"), &self.hash, &summary)?;
        Ok(vec![
            ("matched_filter_mode.csv", schema("matched-filter-mode")),
            ("matched_filter.json", schema("matched-filter")),
        ])
    }

    fn qnd(&self) -> Result<Vec<(&'static str, String)>> {
        let cal = self.load_calibration()?;
        let q = &self.cfg.qnd;
        let base = self.cfg.ensemble_config()?;
        let per_atom = self.mean_coupling(&base, &self.bank_for(&base)?);
        let atoms = self.atoms_for_phase(q.phi_n_target_rad, per_atom)?;
        let multiplier = self.cfg.ensemble.optical_depth_multiplier;
        let scenarios = [
            ("baseline", multiplier, base.motion_enabled),
            ("enhanced", multiplier * q.enhanced_optical_depth_multiplier, q.enhanced_motion_enabled),
        ];

        #[derive(Serialize)]
        struct Scenario {
            name: &'static str,
            atom_number: u64,
            optical_depth_multiplier: f64,
            motion_enabled: bool,
            mean_phi_total_rad: f64,
            contrast: f64,
            filter_snr: f64,
            filter_condition: f64,
            filter_regularization_rad2: f64,
            conditional: ConditionalVariance,
            verdict: SqueezingVerdict,
        }
        let mut summaries = Vec::new();
        let mut pair_rows = Vec::new();
        let mut mode_rows = Vec::new();
        let schedule = self.cfg.qnd_schedule();
        let times = schedule.sample_times();
        for (k, (name, mult, motion)) in scenarios.into_iter().enumerate() {
            let ens = EnsembleConfig {
                mean_atom_number: atoms as f64,
                loading: LoadingModel::Fixed,
                coupling: self.cfg.coupling_profile().scaled(mult),
                motion_enabled: motion,
                ..base
            };
            let settings = QndSettings {
                ensemble: ens,
                schedule,
                fit_model: cal.model(),
                ramsey: self.cfg.ramsey_params(),
                training_shots: q.training_shots,
                filter: self.cfg.filter_options(),
            };
            let bank = self.bank_for(&ens)?;
            let out = qnd_protocol(&settings, bank, q.shots, derive_seed(self.cfg.master_seed, Domain::Ensemble, k as u64))?;
            for p in &out.pairs {
                pair_rows.push(vec![name.to_string(), p.shot_id.to_string(), p.pre.to_string(), p.fin.to_string()]);
            }
            for (i, qv) in out.filter.q_opt.iter().enumerate() {
                mode_rows.push(vec![
                    name.to_string(),
                    (times[i] * 1e6).to_string(),
                    qv.to_string(),
                    out.signal.samples[i].to_string(),
                ]);
            }
            summaries.push(Scenario {
                name,
                atom_number: atoms,
                optical_depth_multiplier: mult,
                motion_enabled: motion,
                mean_phi_total_rad: out.mean_phi_n,
                contrast: out.contrast,
                filter_snr: out.filter.snr,
                filter_condition: out.filter.condition_used,
                filter_regularization_rad2: out.filter.regularization,
                conditional: out.conditional,
                verdict: out.verdict,
            });
        }
        io::write_csv(
            &self.path("qnd_pairs.csv"),
            &schema("qnd-pairs"),
            &self.hash,
            &["scenario", "shot_id", "pre", "final"],
            pair_rows,
        )?;
        io::write_csv(
            &self.path("qnd_filter_modes.csv"),
            &schema("qnd-filter-modes"),
            &self.hash,
            &["scenario", "t_us", "q_opt", "signal_rad"],
            mode_rows,
        )?;
        #[derive(Serialize)]
        struct Verdicts {
            scenarios: Vec<Scenario>,
        }
        io::write_json(
            &self.path("qnd_verdict.json"),
            &schema("qnd-verdict"),
            &self.hash,
            &Verdicts { scenarios: summaries },
        )?;
        Ok(vec![
            ("qnd_pairs.csv", schema("qnd-pairs")),
            ("qnd_filter_modes.csv", schema("qnd-filter-modes")),
            ("qnd_verdict.json", schema("qnd-verdict")),
        ])
    }
}
