//! Two-segment QND protocol: a short segment-1 probe read out with the
//! matched filter (pre-measurement), followed after the population swap by
//! a segment-2 fit (final measurement).
//!
//! Both readouts are expressed as population differences normalised by the
//! mean total phase of a training batch, `≈ ΔN/N`. The pre-measurement
//! subtracts the shot's own total phase from the segment-2 fit, which removes
//! loading and coupling-sum fluctuations; the detection noise this shares
//! with the final estimate is three orders of magnitude below the atomic
//! signal at the default settings.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{segment_fluctuations, FitOptions, TraceBasis};
use crate::filter::{
    build_signal, conditional_variance, optimal_mode_with, wineland_check, ConditionalVariance,
    FilterOptions, FilterResult, SignalModel, SqueezingVerdict,
};
use crate::probe::{EnsembleConfig, ProbeSchedule, PumpingModel, RamseyParams, ShotSynthesizer};
use crate::rng::{derive_seed, Domain};
use crate::stats::estimate_covariance;
use crate::trap::OrbitBank;

#[derive(Debug, Clone)]
pub struct QndSettings {
    pub ensemble: EnsembleConfig,
    pub schedule: ProbeSchedule,
    /// Calibrated response used by the estimators.
    pub fit_model: PumpingModel,
    pub ramsey: RamseyParams,
    /// Shots used to estimate the segment-1 noise covariance.
    pub training_shots: usize,
    pub filter: FilterOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QndPair {
    pub shot_id: u64,
    pub pre: f64,
    pub fin: f64,
}

#[derive(Debug, Clone)]
pub struct QndOutcome {
    pub pairs: Vec<QndPair>,
    pub signal: SignalModel,
    pub filter: FilterResult,
    /// Segment-1 fluctuation covariance of the training batch.
    pub covariance: DMatrix<f64>,
    pub mean_phi_n: f64,
    /// Ramsey contrast left after the pre-measurement.
    pub contrast: f64,
    pub conditional: ConditionalVariance,
    pub verdict: SqueezingVerdict,
}

/// Runs training and evaluation batches and applies the Wineland criterion.
/// `bank` must be supplied for thermal ensembles.
pub fn qnd_protocol(
    settings: &QndSettings,
    bank: Option<Arc<OrbitBank>>,
    shots: usize,
    seed: u64,
) -> Result<QndOutcome> {
    settings.ramsey.validate()?;
    settings.fit_model.validate()?;
    let synth = ShotSynthesizer::with_bank(&settings.ensemble, &settings.schedule, bank)?;
    let schedule = &settings.schedule;
    let full = TraceBasis::new(schedule, &settings.fit_model, &FitOptions::default())?;
    let late = TraceBasis::new(
        schedule,
        &settings.fit_model,
        &FitOptions { include_pre_flip: false, ..Default::default() },
    )?;
    let n_pre = schedule.segment1_samples();
    let times = schedule.sample_times();

    let training: Vec<(f64, Vec<f64>)> = (0..settings.training_shots as u64)
        .into_par_iter()
        .map(|i| {
            let shot = synth.synthesize(i, derive_seed(seed, Domain::QndTraining, i));
            let est = full.fit(&shot.trace)?;
            let d = segment_fluctuations(&shot, &settings.fit_model, est.phi_n)?;
            Ok((est.phi_n, d))
        })
        .collect::<Result<_>>()?;
    if training.len() < 2 {
        return Err(Error::InvalidInput("QND training needs at least 2 shots".into()));
    }
    let mean_phi_n = training.iter().map(|(p, _)| p).sum::<f64>() / training.len() as f64;
    if !(mean_phi_n.abs() > 0.0) {
        return Err(Error::Numeric("training batch has zero mean total phase".into()));
    }
    let series: Vec<Vec<f64>> = training.into_iter().map(|(_, d)| d).collect();
    let covariance = estimate_covariance(&series)?;
    let signal = build_signal(mean_phi_n, &settings.fit_model, &settings.ramsey, &times[..n_pre])?;
    let filter = optimal_mode_with(&covariance, &signal, &settings.filter)?;
    let response: Vec<f64> = times[..n_pre].iter().map(|&t| settings.fit_model.eval(t)).collect();
    let q_dot_m: f64 = filter.q_opt.iter().zip(&response).map(|(q, m)| q * m).sum();
    if !(q_dot_m.abs() > 0.0) {
        return Err(Error::Numeric("matched filter is orthogonal to the response".into()));
    }

    let pairs: Vec<QndPair> = (0..shots as u64)
        .into_par_iter()
        .map(|i| {
            let shot = synth.synthesize(i, derive_seed(seed, Domain::QndEvaluation, i));
            let upper: f64 =
                filter.q_opt.iter().zip(&shot.trace[..n_pre]).map(|(q, y)| q * y).sum::<f64>()
                    / q_dot_m;
            let fin = late.fit(&shot.trace)?;
            Ok(QndPair {
                shot_id: i,
                pre: (2.0 * upper - fin.phi_n) / mean_phi_n,
                fin: fin.phi_delta / mean_phi_n,
            })
        })
        .collect::<Result<_>>()?;
    let pre: Vec<f64> = pairs.iter().map(|p| p.pre).collect();
    let fin: Vec<f64> = pairs.iter().map(|p| p.fin).collect();
    let conditional = conditional_variance(&pre, &fin)?;
    let contrast = settings.ramsey.eval(schedule.segment1_duration);
    let verdict = wineland_check(conditional.variance, conditional.var_final, contrast)?;
    Ok(QndOutcome {
        pairs,
        signal,
        filter,
        covariance,
        mean_phi_n,
        contrast,
        conditional,
        verdict,
    })
}
