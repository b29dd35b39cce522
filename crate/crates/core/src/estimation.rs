//! Per-shot least-squares estimation of the two population phases.
//!
//! A trace is modelled as `φ₄ b₁(t) + φ₃ b₂(t)` with `b₁ = m̂(t)` and
//! `b₂ = m̂(t − t_flip)` after the swap (zero before). The 2×2 normal
//! equations are solved in closed form.

use nalgebra::{DMatrix, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::probe::{ProbeSchedule, PumpingModel, ShotRecord};

/// Gram condition numbers above this are flagged by default.
pub const CONDITION_WARNING: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatePair {
    pub phi4: f64,
    pub phi3: f64,
    pub phi_n: f64,
    pub phi_delta: f64,
    pub fit_residual_rms: f64,
    pub gram_condition: f64,
    pub ill_conditioned: bool,
}

/// `(φ_N, φ_Δ) = (φ₄ + φ₃, φ₄ − φ₃)`.
pub fn derive_estimators(phi4: f64, phi3: f64) -> (f64, f64) {
    (phi4 + phi3, phi4 - phi3)
}

/// Inverse of [`derive_estimators`].
pub fn split_estimators(phi_n: f64, phi_delta: f64) -> (f64, f64) {
    (0.5 * (phi_n + phi_delta), 0.5 * (phi_n - phi_delta))
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Fit segment-1 samples as well as segment 2.
    pub include_pre_flip: bool,
    pub condition_warning: f64,
    /// Generalised least squares: inverse noise covariance over the fitted
    /// samples. `None` is ordinary least squares.
    pub weight: Option<DMatrix<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { include_pre_flip: true, condition_warning: CONDITION_WARNING, weight: None }
    }
}

/// The fit basis on a schedule's sample grid, reusable across a batch.
#[derive(Debug, Clone)]
pub struct TraceBasis {
    /// Indices into the trace that take part in the fit.
    pub used: Vec<usize>,
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
    gram: Matrix2<f64>,
    gram_inv: Matrix2<f64>,
    condition: f64,
    ill_conditioned: bool,
    weight: Option<DMatrix<f64>>,
    len: usize,
}

impl TraceBasis {
    pub fn new(schedule: &ProbeSchedule, model: &PumpingModel, options: &FitOptions) -> Result<Self> {
        schedule.validate()?;
        let times = schedule.sample_times();
        let n_pre = schedule.segment1_samples();
        let t_flip = schedule.t_flip();
        let first = if options.include_pre_flip { 0 } else { n_pre };
        let used: Vec<usize> = (first..times.len()).collect();
        let upper: Vec<f64> = used.iter().map(|&i| model.eval(times[i])).collect();
        let lower: Vec<f64> = used
            .iter()
            .map(|&i| if i < n_pre { 0.0 } else { model.eval((times[i] - t_flip).max(0.0)) })
            .collect();
        if let Some(w) = &options.weight {
            if w.shape() != (used.len(), used.len()) {
                return Err(invalid(format!(
                    "weight matrix is {:?}, fit uses {} samples",
                    w.shape(),
                    used.len()
                )));
            }
        }
        let gram = match &options.weight {
            None => Matrix2::new(
                dot(&upper, &upper),
                dot(&upper, &lower),
                dot(&upper, &lower),
                dot(&lower, &lower),
            ),
            Some(w) => {
                let u = nalgebra::DVector::from_column_slice(&upper);
                let l = nalgebra::DVector::from_column_slice(&lower);
                let wu = w * &u;
                let wl = w * &l;
                Matrix2::new(u.dot(&wu), u.dot(&wl), l.dot(&wu), l.dot(&wl))
            }
        };
        let det = gram.determinant();
        if !(det > 1e-14 * gram[(0, 0)] * gram[(1, 1)]) {
            return Err(Error::Singular(format!(
                "fit basis is degenerate (Gram determinant {det:e})"
            )));
        }
        let gram_inv = Matrix2::new(gram[(1, 1)], -gram[(0, 1)], -gram[(1, 0)], gram[(0, 0)]) / det;
        let condition = condition_2x2(&gram);
        Ok(Self {
            used,
            upper,
            lower,
            gram,
            gram_inv,
            condition,
            ill_conditioned: condition > options.condition_warning,
            weight: options.weight.clone(),
            len: times.len(),
        })
    }

    pub fn gram(&self) -> &Matrix2<f64> {
        &self.gram
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Covariance of `(φ₄, φ₃)` under white noise of standard deviation
    /// `sigma` per sample (ordinary least squares).
    pub fn estimator_covariance(&self, sigma: f64) -> Matrix2<f64> {
        self.gram_inv * (sigma * sigma)
    }

    /// Variance of `φ_Δ` under white noise `sigma`.
    pub fn delta_noise_variance(&self, sigma: f64) -> f64 {
        let c = self.estimator_covariance(sigma);
        c[(0, 0)] + c[(1, 1)] - 2.0 * c[(0, 1)]
    }

    pub fn fit(&self, trace: &[f64]) -> Result<EstimatePair> {
        if trace.len() != self.len {
            return Err(invalid(format!(
                "trace has {} samples, schedule has {}",
                trace.len(),
                self.len
            )));
        }
        let y: Vec<f64> = self.used.iter().map(|&i| trace[i]).collect();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(invalid("trace contains non-finite samples"));
        }
        let (r1, r2) = match &self.weight {
            None => (dot(&self.upper, &y), dot(&self.lower, &y)),
            Some(w) => {
                let wy = w * nalgebra::DVector::from_column_slice(&y);
                (dot(&self.upper, wy.as_slice()), dot(&self.lower, wy.as_slice()))
            }
        };
        let phi4 = self.gram_inv[(0, 0)] * r1 + self.gram_inv[(0, 1)] * r2;
        let phi3 = self.gram_inv[(1, 0)] * r1 + self.gram_inv[(1, 1)] * r2;
        let ss: f64 = y
            .iter()
            .zip(self.upper.iter().zip(&self.lower))
            .map(|(v, (u, l))| (v - phi4 * u - phi3 * l).powi(2))
            .sum();
        let (phi_n, phi_delta) = derive_estimators(phi4, phi3);
        Ok(EstimatePair {
            phi4,
            phi3,
            phi_n,
            phi_delta,
            fit_residual_rms: (ss / y.len() as f64).sqrt(),
            gram_condition: self.condition,
            ill_conditioned: self.ill_conditioned,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn condition_2x2(g: &Matrix2<f64>) -> f64 {
    let tr = g[(0, 0)] + g[(1, 1)];
    let det = g.determinant();
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    let hi = 0.5 * tr + disc;
    let lo = 0.5 * tr - disc;
    if lo > 0.0 { hi / lo } else { f64::INFINITY }
}

/// Ordinary least-squares fit over both segments.
pub fn fit_shot(trace: &ShotRecord, m: &PumpingModel) -> Result<EstimatePair> {
    fit_trace(&trace.trace, &trace.schedule, m, &FitOptions::default())
}

pub fn fit_trace(
    trace: &[f64],
    schedule: &ProbeSchedule,
    m: &PumpingModel,
    options: &FitOptions,
) -> Result<EstimatePair> {
    TraceBasis::new(schedule, m, options)?.fit(trace)
}

/// Segment-1 samples minus their expectation `(φ_N/2)·m̂(t)`.
pub fn segment_fluctuations(trace: &ShotRecord, m: &PumpingModel, phi_n: f64) -> Result<Vec<f64>> {
    let s = &trace.schedule;
    s.validate()?;
    if trace.trace.len() != s.len() {
        return Err(invalid("trace length does not match its schedule"));
    }
    let n_pre = s.segment1_samples();
    Ok(s.sample_times()[..n_pre]
        .iter()
        .zip(&trace.trace)
        .map(|(&t, &y)| y - 0.5 * phi_n * m.eval(t))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::two_segment_mean;

    const MODEL: PumpingModel = PumpingModel { beta: 1.6, tau_at: 10e-6, tau_loss: 400e-6 };
    const SCHEDULE: ProbeSchedule = ProbeSchedule {
        segment1_duration: 60e-6,
        gap_duration: 40e-6,
        segment2_duration: 200e-6,
        sample_period: 0.5e-6,
    };

    fn model_trace(phi4: f64, phi3: f64) -> Vec<f64> {
        SCHEDULE
            .sample_times()
            .iter()
            .map(|&t| two_segment_mean(&MODEL, &SCHEDULE, phi4, phi3, t).unwrap().unwrap())
            .collect()
    }

    fn record(trace: Vec<f64>) -> ShotRecord {
        ShotRecord {
            shot_id: 0,
            seed: 0,
            schedule: SCHEDULE,
            trace,
            truth: crate::probe::ShotTruth { n_atoms: 0, n_upper: 0, n_lower: 0, couplings: vec![] },
        }
    }

    #[test]
    fn estimator_examples() {
        assert_eq!(derive_estimators(1.0, 1.0), (2.0, 0.0));
        assert_eq!(derive_estimators(1.0, 0.0), (1.0, 1.0));
        assert_eq!(split_estimators(2.0, 0.0), (1.0, 1.0));
    }

    #[test]
    fn noiseless_trace_is_recovered_exactly() {
        let fit = fit_shot(&record(model_trace(0.3, 0.5)), &MODEL).unwrap();
        assert!((fit.phi4 - 0.3).abs() < 1e-12 * 0.3);
        assert!((fit.phi3 - 0.5).abs() < 1e-12 * 0.5);
        assert!(fit.fit_residual_rms < 1e-14);
        assert!(!fit.ill_conditioned);
        assert!(fit.gram_condition > 1.0 && fit.gram_condition < 100.0);
    }

    #[test]
    fn segment_two_only_fit_also_recovers() {
        let opts = FitOptions { include_pre_flip: false, ..Default::default() };
        let fit = fit_trace(&model_trace(0.3, 0.5), &SCHEDULE, &MODEL, &opts).unwrap();
        assert!((fit.phi4 - 0.3).abs() < 1e-10 && (fit.phi3 - 0.5).abs() < 1e-10);
    }

    #[test]
    fn gls_with_identity_matches_ols() {
        let trace: Vec<f64> = model_trace(0.2, 0.1)
            .iter()
            .enumerate()
            .map(|(i, v)| v + 1e-3 * ((i * 37 % 11) as f64 - 5.0))
            .collect();
        let ols = fit_trace(&trace, &SCHEDULE, &MODEL, &FitOptions::default()).unwrap();
        let n = SCHEDULE.len();
        let opts = FitOptions { weight: Some(DMatrix::identity(n, n) * 3.0), ..Default::default() };
        let gls = fit_trace(&trace, &SCHEDULE, &MODEL, &opts).unwrap();
        assert!((ols.phi4 - gls.phi4).abs() < 1e-12 && (ols.phi3 - gls.phi3).abs() < 1e-12);
    }

    #[test]
    fn bad_input_is_rejected() {
        let mut trace = model_trace(0.3, 0.5);
        trace[10] = f64::NAN;
        assert!(matches!(fit_shot(&record(trace), &MODEL), Err(Error::InvalidInput(_))));
        assert!(fit_shot(&record(vec![0.0; 5]), &MODEL).is_err());
    }

    #[test]
    fn degenerate_basis_is_singular() {
        // with no pumping dynamics and no loss the two basis functions
        // coincide on segment 2
        let flat = PumpingModel { beta: 1.0, tau_at: 1e-6, tau_loss: f64::INFINITY };
        let opts = FitOptions { include_pre_flip: false, ..Default::default() };
        let err = TraceBasis::new(&SCHEDULE, &flat, &opts).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
    }

    #[test]
    fn condition_flag_respects_threshold() {
        let opts = FitOptions { condition_warning: 1.0, ..Default::default() };
        let fit = fit_trace(&model_trace(0.3, 0.5), &SCHEDULE, &MODEL, &opts).unwrap();
        assert!(fit.ill_conditioned);
    }

    #[test]
    fn balanced_noiseless_shot_has_no_fluctuations() {
        let rec = record(model_trace(0.4, 0.4));
        let d = segment_fluctuations(&rec, &MODEL, 0.8).unwrap();
        assert_eq!(d.len(), 120);
        assert!(d.iter().all(|x| x.abs() < 1e-15));
        let noise = record((0..SCHEDULE.len()).map(|i| (i as f64).sin()).collect());
        let d = segment_fluctuations(&noise, &MODEL, 0.0).unwrap();
        assert!(d.iter().enumerate().all(|(i, &x)| x == (i as f64).sin()));
    }
}
