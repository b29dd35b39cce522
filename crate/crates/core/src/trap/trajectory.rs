use std::f64::consts::PI;

use serde::Serialize;

use super::{AtomState, CouplingProfile, TrapPotential};
use crate::error::{domain, invalid, Result};
use crate::physics::CESIUM_MASS;

/// Minimum number of integration steps per small-oscillation period.
pub const STEPS_PER_PERIOD: f64 = 50.0;

/// Largest admissible max |E(t) − E(0)| / |E(0)| along a trajectory.
pub const ENERGY_TOLERANCE: f64 = 1e-4;

/// Upper bound on the substep refinement applied when a trajectory exceeds
/// [`ENERGY_TOLERANCE`] at the requested step.
pub(crate) const MAX_SUBSTEPS: usize = 256;

/// Uniformly sampled radial trajectory.
///
/// If the atom escapes (reaches the surface, the outer bound limit, or starts
/// unbound) the record stops at the escape step and `escaped` is set; the
/// atom is treated as absent afterwards.
#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub time_step: f64,
    pub samples: Vec<AtomState>,
    pub escaped: bool,
    /// max |E(t) − E(0)| / |E(0)| over the recorded samples
    pub energy_drift: f64,
    /// Leapfrog substeps per recorded sample.
    pub substeps: usize,
}

impl Trajectory {
    pub fn duration(&self) -> f64 {
        self.samples.len().saturating_sub(1) as f64 * self.time_step
    }

    /// Writes `t, r, v, φ(r)` rows (SI units, radians) as CSV.
    pub fn write_csv<W: std::io::Write>(&self, out: W, c: &CouplingProfile) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_s", "r_m", "v_m_per_s", "coupling_rad"])?;
        for (k, s) in self.samples.iter().enumerate() {
            w.write_record([
                (k as f64 * self.time_step).to_string(),
                s.position.to_string(),
                s.velocity.to_string(),
                c.at(s.position).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Velocity-Verlet integrator state.
pub(crate) struct Leapfrog<'a> {
    trap: &'a TrapPotential,
    inv_mass: f64,
    dt: f64,
    pub r: f64,
    pub v: f64,
    force: f64,
}

impl<'a> Leapfrog<'a> {
    pub fn new(trap: &'a TrapPotential, mass: f64, dt: f64, start: AtomState) -> Self {
        Self {
            trap,
            inv_mass: 1.0 / mass,
            dt,
            r: start.position,
            v: start.velocity,
            force: trap.force(start.position),
        }
    }

    #[inline]
    pub fn step(&mut self) {
        let half = 0.5 * self.dt * self.inv_mass;
        self.v += half * self.force;
        self.r += self.dt * self.v;
        self.force = self.trap.force(self.r);
        self.v += half * self.force;
    }
}

pub(crate) fn check_time_step(p: &TrapPotential, mass: f64, dt: f64) -> Result<()> {
    let period = 2.0 * PI / p.harmonic_angular_frequency(mass);
    if !(dt > 0.0) || dt > period / STEPS_PER_PERIOD {
        return Err(domain(format!(
            "time step {dt:e} s must be positive and at most 1/{STEPS_PER_PERIOD} of the {period:e} s oscillation period"
        )));
    }
    Ok(())
}

/// Integrates a cesium atom from `a` for `total` seconds with leapfrog steps
/// of `dt`.
pub fn simulate_trajectory(
    a: AtomState,
    p: &TrapPotential,
    dt: f64,
    total: f64,
) -> Result<Trajectory> {
    p.validate()?;
    check_time_step(p, CESIUM_MASS, dt)?;
    if !(total >= 0.0 && total.is_finite()) {
        return Err(invalid("trajectory duration must be non-negative"));
    }
    if !(a.position > 0.0 && a.position.is_finite() && a.velocity.is_finite()) {
        return Err(domain("initial position must be positive"));
    }
    let steps = (total / dt).round() as usize;
    let e0 = a.energy(p, CESIUM_MASS);
    if e0 >= 0.0 {
        return Ok(Trajectory {
            time_step: dt,
            samples: vec![a],
            escaped: true,
            energy_drift: 0.0,
            substeps: 1,
        });
    }
    let limit = p.bound_limit();
    let mut substeps = 1;
    loop {
        let mut samples = Vec::with_capacity(steps + 1);
        samples.push(a);
        let mut drift = 0.0f64;
        let mut escaped = false;
        let mut lf = Leapfrog::new(p, CESIUM_MASS, dt / substeps as f64, a);
        for _ in 0..steps {
            for _ in 0..substeps {
                lf.step();
            }
            if !(lf.r > 0.0) || lf.r > limit {
                escaped = true;
                break;
            }
            let s = AtomState { position: lf.r, velocity: lf.v };
            drift = drift.max((s.energy(p, CESIUM_MASS) - e0).abs() / e0.abs());
            samples.push(s);
        }
        if drift < ENERGY_TOLERANCE || substeps >= MAX_SUBSTEPS {
            return Ok(Trajectory { time_step: dt, samples, escaped, energy_drift: drift, substeps });
        }
        substeps *= 2;
    }
}

/// Mean coupling over the leading `window` seconds of a trajectory
/// (trapezoidal rule). `window = 0` gives the instantaneous coupling at t = 0.
pub fn time_averaged_coupling(tr: &Trajectory, c: &CouplingProfile, window: f64) -> Result<f64> {
    c.validate()?;
    if tr.samples.is_empty() {
        return Err(invalid("empty trajectory"));
    }
    if !(window >= 0.0) {
        return Err(invalid("averaging window must be non-negative"));
    }
    let dt = tr.time_step;
    if !tr.escaped && window > tr.duration() * (1.0 + 1e-12) + 1e-18 {
        return Err(invalid(format!(
            "window {window:e} s exceeds trajectory duration {:e} s",
            tr.duration()
        )));
    }
    let phi = |i: usize| tr.samples.get(i).map_or(0.0, |s| c.at(s.position));
    if window == 0.0 {
        return Ok(phi(0));
    }
    let full = ((window / dt) * (1.0 + 1e-12)).floor() as usize;
    let mut integral = 0.0;
    for i in 0..full {
        integral += 0.5 * (phi(i) + phi(i + 1)) * dt;
    }
    let rest = window - full as f64 * dt;
    if rest > 0.0 {
        let frac = rest / dt;
        let end = phi(full) + frac * (phi(full + 1) - phi(full));
        integral += 0.5 * (phi(full) + end) * rest;
    }
    Ok(integral / window)
}
