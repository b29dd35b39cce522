//! Offline calibration of the pumping response from averaged traces of
//! fully polarised ensembles with different atom numbers.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsq::{levenberg_marquardt, LmOptions};
use crate::probe::{EnsembleConfig, LoadingModel, Preparation, ProbeSchedule, PumpingModel, ShotSynthesizer};
use crate::rng::{derive_seed, Domain};
use crate::trap::OrbitBank;

/// Mean trace of one atom-number group.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationGroup {
    pub atom_number: u64,
    pub n_shots: usize,
    /// Sample times, s.
    pub times: Vec<f64>,
    pub mean_trace: Vec<f64>,
    /// Shot count and summed trace of each jackknife batch; empty when the
    /// standard errors should come from the fit residuals instead.
    pub batch_sums: Vec<(usize, Vec<f64>)>,
}

/// Batches used for jackknife standard errors of calibration fits.
pub const JACKKNIFE_BATCHES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseFit {
    pub atom_number: u64,
    /// Phase at `t = 0`, rad.
    pub amplitude: f64,
    pub amplitude_se: f64,
    pub beta: f64,
    pub beta_se: f64,
    pub tau_at_us: f64,
    pub tau_at_us_se: f64,
    pub tau_loss_us: f64,
    pub tau_loss_us_se: f64,
    pub rms_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub beta: f64,
    pub beta_se: f64,
    pub tau_at_us: f64,
    pub tau_at_us_se: f64,
    pub tau_loss_us: f64,
    pub tau_loss_us_se: f64,
    pub groups: Vec<ResponseFit>,
}

impl Calibration {
    pub fn model(&self) -> PumpingModel {
        PumpingModel {
            beta: self.beta,
            tau_at: self.tau_at_us * 1e-6,
            tau_loss: self.tau_loss_us * 1e-6,
        }
    }
}

/// Simulates `shots` traces per atom number with every atom prepared in the
/// probed state and returns the averaged traces.
pub fn simulate_groups(
    ensemble: &EnsembleConfig,
    schedule: &ProbeSchedule,
    bank: Option<Arc<OrbitBank>>,
    atom_numbers: &[u64],
    shots: usize,
    master_seed: u64,
) -> Result<Vec<CalibrationGroup>> {
    if shots == 0 {
        return Err(Error::InvalidInput("calibration groups need at least one shot".into()));
    }
    let times = schedule.sample_times();
    atom_numbers
        .iter()
        .enumerate()
        .map(|(g, &n)| {
            let cfg = EnsembleConfig {
                mean_atom_number: n as f64,
                loading: LoadingModel::Fixed,
                preparation: Preparation::Pi,
                ..*ensemble
            };
            let synth = ShotSynthesizer::with_bank(&cfg, schedule, bank.clone())?;
            let base = (g as u64) << 32;
            let traces: Vec<Vec<f64>> = (0..shots as u64)
                .into_par_iter()
                .map(|i| synth.synthesize(i, derive_seed(master_seed, Domain::Calibration, base | i)).trace)
                .collect();
            let k = JACKKNIFE_BATCHES.min(shots);
            let mut batch_sums = vec![(0, vec![0.0; times.len()]); if k >= 2 { k } else { 0 }];
            let mut sum = vec![0.0; times.len()];
            for (i, tr) in traces.iter().enumerate() {
                sum.iter_mut().zip(tr).for_each(|(a, y)| *a += y);
                if let Some((count, b)) = batch_sums.get_mut(i % k.max(1)) {
                    *count += 1;
                    b.iter_mut().zip(tr).for_each(|(a, y)| *a += y);
                }
            }
            Ok(CalibrationGroup {
                atom_number: n,
                n_shots: shots,
                times: times.clone(),
                mean_trace: sum.into_iter().map(|s| s / shots as f64).collect(),
                batch_sums,
            })
        })
        .collect()
}

/// Nonlinear fit of `A·m̂(t)` to one averaged trace.
///
/// Parameters are `[A, β, τ_at/µs, 1000/(τ_loss/µs)]`; several starting
/// values of `τ_at` are tried and the lowest residual kept. Standard errors
/// come from a delete-one-batch jackknife over the group's shots when batch
/// sums are available, since motional noise is correlated in time and the
/// residual-based errors would understate it.
pub fn fit_response(group: &CalibrationGroup) -> Result<ResponseFit> {
    let n = group.times.len();
    if n != group.mean_trace.len() || n < 8 {
        return Err(Error::Calibration(format!(
            "group N={} has {} samples for {} times",
            group.atom_number,
            group.mean_trace.len(),
            n
        )));
    }
    let t_us: Vec<f64> = group.times.iter().map(|t| t * 1e6).collect();
    let fail = || Error::Calibration(format!("response fit failed for N={}", group.atom_number));
    let fit = fit_curve(&t_us, &group.mean_trace).ok_or_else(fail)?;
    let p = &fit.parameters;
    if !(p[2] > 0.0 && p[3] > 0.0) || p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Calibration(format!(
            "unphysical response parameters for N={}: {p:?}",
            group.atom_number
        )));
    }
    let mut se: Vec<f64> = (0..4).map(|k| fit.standard_error(k)).collect();
    let k = group.batch_sums.len();
    if k >= 2 {
        let total: Vec<f64> = group.mean_trace.iter().map(|m| m * group.n_shots as f64).collect();
        let mut replicas = Vec::with_capacity(k);
        for (count, sums) in &group.batch_sums {
            let rest = (group.n_shots - count) as f64;
            let y: Vec<f64> = total.iter().zip(sums).map(|(t, b)| (t - b) / rest).collect();
            replicas.push(fit_curve(&t_us, &y).ok_or_else(fail)?.parameters);
        }
        for (j, s) in se.iter_mut().enumerate() {
            let mean = replicas.iter().map(|r| r[j]).sum::<f64>() / k as f64;
            let ss: f64 = replicas.iter().map(|r| (r[j] - mean).powi(2)).sum();
            *s = ((k as f64 - 1.0) / k as f64 * ss).sqrt();
        }
    }
    let tau_loss = 1000.0 / p[3];
    Ok(ResponseFit {
        atom_number: group.atom_number,
        amplitude: p[0],
        amplitude_se: se[0],
        beta: p[1],
        beta_se: se[1],
        tau_at_us: p[2],
        tau_at_us_se: se[2],
        tau_loss_us: tau_loss,
        // first-order propagation through τ = 1000/rate
        tau_loss_us_se: tau_loss * se[3] / p[3],
        rms_residual: (fit.rss / n as f64).sqrt(),
    })
}

fn fit_curve(t_us: &[f64], y: &[f64]) -> Option<crate::lsq::LmFit> {
    let n = t_us.len();
    let residuals = |p: &[f64], out: &mut [f64]| {
        let (a, beta, tau, rate) = (p[0], p[1], p[2], p[3]);
        for ((o, &t), &obs) in out.iter_mut().zip(t_us).zip(y) {
            let m = (beta - (beta - 1.0) * (-t / tau).exp()) * (-t * rate * 1e-3).exp();
            *o = a * m - obs;
        }
    };
    let a0 = y[0];
    let peak = y.iter().cloned().fold(f64::MIN, f64::max);
    let beta0 = if a0 > 0.0 { (peak / a0).max(1.05) } else { 1.5 };
    let mut best = None;
    for tau0 in [3.0, 10.0, 30.0] {
        let Ok(fit) = levenberg_marquardt(residuals, &[a0, beta0, tau0, 2.0], n, LmOptions::default())
        else {
            continue;
        };
        if best.as_ref().map_or(true, |b: &crate::lsq::LmFit| fit.rss < b.rss) {
            best = Some(fit);
        }
    }
    best
}

fn agree(a: f64, a_se: f64, b: f64, b_se: f64, sigma: f64) -> bool {
    let combined = (a_se * a_se + b_se * b_se).sqrt();
    // an undetermined error bar cannot demonstrate disagreement
    !(combined.is_finite()) || (a - b).abs() <= sigma * combined
}

fn weighted_mean(values: &[(f64, f64)]) -> (f64, f64) {
    let usable: Vec<_> = values.iter().filter(|(_, se)| se.is_finite() && *se > 0.0).collect();
    if usable.is_empty() {
        let mean = values.iter().map(|(v, _)| v).sum::<f64>() / values.len() as f64;
        return (mean, f64::NAN);
    }
    let w: f64 = usable.iter().map(|(_, se)| se.powi(-2)).sum();
    let mean = usable.iter().map(|(v, se)| v * se.powi(-2)).sum::<f64>() / w;
    (mean, w.powf(-0.5))
}

/// Fits every group, checks that `β`, `τ_at` and `τ_loss` agree between all
/// pairs of groups within `agreement_sigma` combined standard errors, and
/// returns their inverse-variance weighted means.
pub fn calibrate(groups: &[CalibrationGroup], agreement_sigma: f64) -> Result<Calibration> {
    if groups.len() < 3 {
        return Err(Error::Calibration(format!(
            "calibration needs at least 3 atom-number groups, got {}",
            groups.len()
        )));
    }
    let fits = groups.iter().map(fit_response).collect::<Result<Vec<_>>>()?;
    type Get = fn(&ResponseFit) -> (f64, f64);
    let params: [(&str, Get); 3] = [
        ("beta", |f| (f.beta, f.beta_se)),
        ("tau_at", |f| (f.tau_at_us, f.tau_at_us_se)),
        ("tau_loss", |f| (f.tau_loss_us, f.tau_loss_us_se)),
    ];
    for (name, get) in params {
        for (i, a) in fits.iter().enumerate() {
            for b in &fits[i + 1..] {
                let ((va, sa), (vb, sb)) = (get(a), get(b));
                if !agree(va, sa, vb, sb, agreement_sigma) {
                    return Err(Error::Calibration(format!(
                        "{name} differs between N={} ({va:.6} ± {sa:.2e}) and N={} \
                         ({vb:.6} ± {sb:.2e}) by more than {agreement_sigma}σ",
                        a.atom_number, b.atom_number
                    )));
                }
            }
        }
    }
    let combine = |get: Get| weighted_mean(&fits.iter().map(get).collect::<Vec<_>>());
    let (beta, beta_se) = combine(params[0].1);
    let (tau_at_us, tau_at_us_se) = combine(params[1].1);
    let (tau_loss_us, tau_loss_us_se) = combine(params[2].1);
    let cal = Calibration {
        // a gain below one is unphysical; noise can push an unpumped fit there
        beta: beta.max(1.0),
        beta_se,
        tau_at_us,
        tau_at_us_se,
        tau_loss_us,
        tau_loss_us_se,
        groups: fits,
    };
    cal.model().validate().map_err(|e| Error::Calibration(e.to_string()))?;
    Ok(cal)
}
