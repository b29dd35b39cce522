//! Synthetic phase traces of the two-segment population measurement.

mod ensemble;
mod shot;

use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Result};

pub use ensemble::{
    apply_pulse, apply_pulse_with_error, sample_loading, EnsembleConfig, LoadingModel, Preparation,
};
pub use shot::{synthesize_shot, ShotRecord, ShotSynthesizer, ShotTruth};

/// Phenomenological mean response of the dispersive signal to Zeeman pumping
/// (gain β approached with `tau_at`) and atom loss (`tau_loss`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PumpingModel {
    pub beta: f64,
    /// s
    pub tau_at: f64,
    /// s; may be infinite
    pub tau_loss: f64,
}

impl PumpingModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return Err(invalid(format!("pumping gain must be ≥ 1, got {}", self.beta)));
        }
        if !(self.tau_at > 0.0 && self.tau_at.is_finite()) {
            return Err(invalid("pumping time constant must be positive"));
        }
        if !(self.tau_loss > self.tau_at) {
            return Err(invalid("loss time constant must exceed the pumping time constant"));
        }
        Ok(())
    }

    /// m̂(t) without argument checks.
    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        (self.beta - (self.beta - 1.0) * (-t / self.tau_at).exp()) * (-t / self.tau_loss).exp()
    }
}

pub fn mean_response(m: &PumpingModel, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(domain(format!("response time must be non-negative, got {t}")));
    }
    Ok(m.eval(t))
}

/// Probe timing: segment 1, a probe-off gap during which the populations
/// are swapped, and segment 2. Samples are taken at multiples of
/// `sample_period` from the start of each segment; the gap carries no data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSchedule {
    pub segment1_duration: f64,
    pub gap_duration: f64,
    pub segment2_duration: f64,
    pub sample_period: f64,
}

impl ProbeSchedule {
    pub fn validate(&self) -> Result<()> {
        let sp = self.sample_period;
        if !(sp > 0.0 && sp.is_finite()) {
            return Err(invalid("sample period must be positive"));
        }
        for (name, d, allow_zero) in [
            ("segment 1", self.segment1_duration, false),
            ("gap", self.gap_duration, true),
            ("segment 2", self.segment2_duration, false),
        ] {
            let k = d / sp;
            let positive = if allow_zero { d >= 0.0 } else { d > 0.0 };
            if !positive || !d.is_finite() || (k - k.round()).abs() > 1e-6 {
                return Err(invalid(format!(
                    "{name} duration {d:e} s is not a positive multiple of the sample period"
                )));
            }
        }
        Ok(())
    }

    pub fn t_flip(&self) -> f64 {
        self.segment1_duration + self.gap_duration
    }

    pub fn end(&self) -> f64 {
        self.t_flip() + self.segment2_duration
    }

    pub fn segment1_samples(&self) -> usize {
        (self.segment1_duration / self.sample_period).round() as usize
    }

    pub fn segment2_samples(&self) -> usize {
        (self.segment2_duration / self.sample_period).round() as usize
    }

    pub fn len(&self) -> usize {
        self.segment1_samples() + self.segment2_samples()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample times of both segments in order; gap times are absent.
    pub fn sample_times(&self) -> Vec<f64> {
        let sp = self.sample_period;
        let t_flip = self.t_flip();
        (0..self.segment1_samples())
            .map(|i| i as f64 * sp)
            .chain((0..self.segment2_samples()).map(|i| t_flip + i as f64 * sp))
            .collect()
    }
}

/// Two-segment mean trace at time `t`; `None` inside the probe-off gap.
pub fn two_segment_mean(
    m: &PumpingModel,
    s: &ProbeSchedule,
    phi4: f64,
    phi3: f64,
    t: f64,
) -> Result<Option<f64>> {
    // boundaries are compared with a tolerance so that sample times built
    // from the durations land in the intended segment
    let eps = 1e-6 * s.sample_period;
    if !(t >= 0.0) || t > s.end() + eps {
        return Err(domain(format!("time {t:e} s lies outside the schedule")));
    }
    let t_flip = s.t_flip();
    if t < s.segment1_duration - eps {
        Ok(Some(phi4 * m.eval(t)))
    } else if t < t_flip - eps {
        Ok(None)
    } else {
        Ok(Some(phi4 * m.eval(t) + phi3 * m.eval((t - t_flip).max(0.0))))
    }
}

/// Ramsey fringe contrast after probing for a time t, relaxing from `eta0`
/// towards `eta_inf` with time constant `tau_rec`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RamseyParams {
    pub eta0: f64,
    pub eta_inf: f64,
    /// s
    pub tau_rec: f64,
}

impl RamseyParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta0", self.eta0), ("eta_inf", self.eta_inf)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.tau_rec > 0.0) {
            return Err(invalid("contrast recovery time must be positive"));
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        self.eta_inf - (self.eta_inf - self.eta0) * (-t / self.tau_rec).exp()
    }
}

pub fn ramsey_contrast(t: f64, params: &RamseyParams) -> Result<f64> {
    params.validate()?;
    if !(t >= 0.0) {
        return Err(domain("contrast time must be non-negative"));
    }
    Ok(params.eval(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MODEL: PumpingModel = PumpingModel { beta: 1.6, tau_at: 10e-6, tau_loss: 400e-6 };
    const SCHEDULE: ProbeSchedule = ProbeSchedule {
        segment1_duration: 8e-6,
        gap_duration: 32e-6,
        segment2_duration: 120e-6,
        sample_period: 0.5e-6,
    };

    #[test]
    fn response_examples() {
        assert_eq!(mean_response(&MODEL, 0.0).unwrap(), 1.0);
        let pure_loss = PumpingModel { beta: 1.0, ..MODEL };
        assert!((mean_response(&pure_loss, 37e-6).unwrap() - (-37.0f64 / 400.0).exp()).abs() < 1e-15);
        let lossless = PumpingModel { beta: 2.0, tau_at: 10e-6, tau_loss: f64::INFINITY };
        let v = mean_response(&lossless, 10e-6).unwrap();
        assert!((v - (2.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!((v - 1.6321).abs() < 1e-4);
        assert!(mean_response(&MODEL, -1e-9).is_err());
    }

    #[test]
    fn pumping_validation() {
        assert!(MODEL.validate().is_ok());
        assert!(PumpingModel { beta: 0.9, ..MODEL }.validate().is_err());
        assert!(PumpingModel { tau_at: 0.0, ..MODEL }.validate().is_err());
        assert!(PumpingModel { tau_loss: 5e-6, ..MODEL }.validate().is_err());
    }

    #[test]
    fn schedule_grid() {
        SCHEDULE.validate().unwrap();
        assert!((SCHEDULE.t_flip() - 40e-6).abs() < 1e-18);
        let t = SCHEDULE.sample_times();
        assert_eq!(t.len(), 16 + 240);
        assert_eq!(t[0], 0.0);
        assert!((t[15] - 7.5e-6).abs() < 1e-18);
        assert!((t[16] - 40e-6).abs() < 1e-18);
        assert!(t.iter().all(|&x| !(8.1e-6..39.9e-6).contains(&x)));
        let bad = ProbeSchedule { segment1_duration: 8.2e-6, ..SCHEDULE };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn two_segment_branches() {
        let pre = two_segment_mean(&MODEL, &SCHEDULE, 0.3, 0.5, 5e-6).unwrap().unwrap();
        assert_eq!(pre, 0.3 * MODEL.eval(5e-6));
        let at_flip = two_segment_mean(&MODEL, &SCHEDULE, 0.3, 0.5, 40e-6).unwrap().unwrap();
        assert!((at_flip - (0.3 * MODEL.eval(40e-6) + 0.5)).abs() < 1e-15);
        let no_f3 = two_segment_mean(&MODEL, &SCHEDULE, 0.3, 0.0, 90e-6).unwrap().unwrap();
        assert_eq!(no_f3, 0.3 * MODEL.eval(90e-6));
        assert_eq!(two_segment_mean(&MODEL, &SCHEDULE, 0.3, 0.5, 20e-6).unwrap(), None);
        assert!(two_segment_mean(&MODEL, &SCHEDULE, 0.3, 0.5, 500e-6).is_err());
    }

    #[test]
    fn ramsey_examples() {
        let p = RamseyParams { eta0: 0.55, eta_inf: 0.63, tau_rec: 40e-6 };
        assert_eq!(ramsey_contrast(0.0, &p).unwrap(), 0.55);
        assert!((ramsey_contrast(1.0, &p).unwrap() - 0.63).abs() < 1e-12);
        let mut prev = 0.0;
        for i in 0..100 {
            let v = ramsey_contrast(i as f64 * 3e-6, &p).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        assert!(ramsey_contrast(0.0, &RamseyParams { eta0: -0.1, ..p }).is_err());
        assert!(ramsey_contrast(0.0, &RamseyParams { eta_inf: 1.1, ..p }).is_err());
    }
}
