use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::thermal::ThermalSampler;
use super::trajectory::{check_time_step, Leapfrog, ENERGY_TOLERANCE, MAX_SUBSTEPS};
use super::{AtomState, CouplingProfile, TrapPotential};
use crate::error::{invalid, Result};
use crate::physics::CESIUM_MASS;
use crate::rng::{substream, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrbitBankSettings {
    pub size: usize,
    /// Leapfrog step, s.
    pub time_step: f64,
    /// Spacing of the stored coupling table, s.
    pub table_step: f64,
    /// Longest orbit followed before it is stored as aperiodic, s.
    pub horizon: f64,
}

/// Coupling history of one thermal orbit.
///
/// Periodic orbits store one period starting at an outward crossing of the
/// trap minimum; orbits whose period exceeds the horizon store the whole
/// horizon from the sampled initial state and are held at their last value
/// beyond it.
#[derive(Debug, Clone)]
pub struct Orbit {
    pub period: Option<f64>,
    table: Vec<f64>,
    table_step: f64,
    inv_table_step: f64,
    /// Time-averaged coupling over the stored record.
    pub mean_coupling: f64,
}

impl Orbit {
    /// Coupling at time `t` after the start of the stored record.
    #[inline]
    pub fn coupling_at(&self, t: f64) -> f64 {
        let n = self.table.len();
        match self.period {
            Some(period) => {
                let mut t = t - period * (t / period).floor();
                if t >= period {
                    t -= period;
                }
                let t = t.max(0.0);
                let x = t * self.inv_table_step;
                let i = x as usize;
                if i + 1 < n {
                    let f = x - i as f64;
                    return self.table[i] + f * (self.table[i + 1] - self.table[i]);
                }
                // final partial interval closes the loop back to the start
                let i = n - 1;
                let left = i as f64 * self.table_step;
                let f = ((t - left) / (period - left)).clamp(0.0, 1.0);
                self.table[i] + f * (self.table[0] - self.table[i])
            }
            None => {
                let x = (t * self.inv_table_step).max(0.0);
                let i = x as usize;
                if i + 1 >= n {
                    return self.table[n - 1];
                }
                let f = x - i as f64;
                self.table[i] + f * (self.table[i + 1] - self.table[i])
            }
        }
    }

    /// Random start time within the orbit, used to dephase atoms drawn from
    /// the same entry.
    pub fn random_offset<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.period {
            Some(p) => p * rng.random::<f64>(),
            None => 0.0,
        }
    }
}

/// Precomputed thermal orbits. Each atom in a motion-enabled shot picks an
/// entry and a uniformly random phase along it, which samples the stationary
/// thermal phase-space distribution.
#[derive(Debug, Clone)]
pub struct OrbitBank {
    pub orbits: Vec<Orbit>,
    pub temperature: f64,
}

impl OrbitBank {
    pub fn build(
        trap: &TrapPotential,
        coupling: &CouplingProfile,
        temperature: f64,
        settings: &OrbitBankSettings,
        seed: u64,
    ) -> Result<Self> {
        coupling.validate()?;
        check_time_step(trap, CESIUM_MASS, settings.time_step)?;
        if settings.size == 0 {
            return Err(invalid("orbit bank size must be positive"));
        }
        if !(settings.table_step >= settings.time_step && settings.horizon > settings.table_step) {
            return Err(invalid("need time step ≤ table step < horizon"));
        }
        let sampler = ThermalSampler::new(trap, CESIUM_MASS, temperature)?;
        let orbits = (0..settings.size)
            .into_par_iter()
            .map(|k| {
                let mut rng = substream(seed, Domain::OrbitBank, k as u64);
                let start = sampler.sample(&mut rng);
                trace_orbit(trap, coupling, start, settings)
            })
            .collect();
        Ok(Self { orbits, temperature })
    }

    pub fn len(&self) -> usize {
        self.orbits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orbits.is_empty()
    }

    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> &Orbit {
        &self.orbits[rng.random_range(0..self.orbits.len())]
    }
}

fn trace_orbit(
    trap: &TrapPotential,
    coupling: &CouplingProfile,
    start: AtomState,
    settings: &OrbitBankSettings,
) -> Orbit {
    let dt = settings.time_step;
    let r_min = trap.minimum_position();
    let limit = trap.bound_limit();
    let max_steps = (settings.horizon / dt).ceil() as usize;
    let e0 = start.energy(trap, CESIUM_MASS);
    let mut substeps = 1;
    let (fine, crossings, lost) = loop {
        let mut lf = Leapfrog::new(trap, CESIUM_MASS, dt / substeps as f64, start);
        let mut fine = Vec::with_capacity(1024);
        fine.push(coupling.at(lf.r));
        let mut crossings: Vec<f64> = Vec::with_capacity(2);
        let mut lost = e0 >= 0.0;
        let mut drift = 0.0f64;
        for step in 1..=max_steps {
            if lost {
                break;
            }
            let r_prev = lf.r;
            for _ in 0..substeps {
                lf.step();
            }
            if !(lf.r > 0.0) || lf.r > limit {
                lost = true;
                break;
            }
            let e = AtomState { position: lf.r, velocity: lf.v }.energy(trap, CESIUM_MASS);
            drift = drift.max((e - e0).abs() / e0.abs());
            fine.push(coupling.at(lf.r));
            if r_prev < r_min && lf.r >= r_min {
                let frac = (r_min - r_prev) / (lf.r - r_prev);
                crossings.push((step as f64 - 1.0 + frac) * dt);
                if crossings.len() == 2 {
                    break;
                }
            }
        }
        if drift < ENERGY_TOLERANCE || substeps >= MAX_SUBSTEPS {
            break (fine, crossings, lost);
        }
        substeps *= 2;
    };
    let sample = |t: f64| -> f64 {
        let x = t / dt;
        let i = x as usize;
        if i + 1 >= fine.len() {
            return if lost { 0.0 } else { fine[fine.len() - 1] };
        }
        fine[i] + (x - i as f64) * (fine[i + 1] - fine[i])
    };
    let step = settings.table_step;
    if crossings.len() == 2 && !lost {
        let period = crossings[1] - crossings[0];
        let n = ((period / step).ceil() as usize).max(1);
        let table: Vec<f64> = (0..n).map(|j| sample(crossings[0] + j as f64 * step)).collect();
        let mean = periodic_mean(&table, step, period);
        Orbit { period: Some(period), table, table_step: step, inv_table_step: 1.0 / step, mean_coupling: mean }
    } else {
        let n = (settings.horizon / step).ceil() as usize + 1;
        let table: Vec<f64> = (0..n).map(|j| sample(j as f64 * step)).collect();
        let mean = table.iter().sum::<f64>() / n as f64;
        Orbit { period: None, table, table_step: step, inv_table_step: 1.0 / step, mean_coupling: mean }
    }
}

/// Trapezoidal mean of a periodic table whose last interval is shorter.
fn periodic_mean(table: &[f64], step: f64, period: f64) -> f64 {
    let n = table.len();
    let mut integral = 0.0;
    for i in 0..n {
        let right = if i + 1 < n { table[i + 1] } else { table[0] };
        let width = if i + 1 < n { step } else { period - step * (n - 1) as f64 };
        integral += 0.5 * (table[i] + right) * width;
    }
    integral / period
}
