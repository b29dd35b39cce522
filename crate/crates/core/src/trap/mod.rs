//! Radial trap potential, probe coupling and classical atom motion.
//!
//! The radial coordinate `r` is the distance from the fiber surface. The
//! potential is the sum of a short-range repulsive and a long-range attractive
//! exponential, `U(r) = A_b e^{−2r/λ_b} − A_r e^{−2r/λ_r}`, which gives a
//! single anharmonic minimum with an exponential tail towards the continuum.

mod orbit;
mod thermal;
mod trajectory;

use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Result};

pub use orbit::{Orbit, OrbitBank, OrbitBankSettings};
pub use thermal::{sample_thermal_state, ThermalSampler};
pub use trajectory::{simulate_trajectory, time_averaged_coupling, Trajectory, ENERGY_TOLERANCE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapPotential {
    /// J
    pub repulsive_amplitude: f64,
    /// m
    pub repulsive_decay_length: f64,
    /// J
    pub attractive_amplitude: f64,
    /// m
    pub attractive_decay_length: f64,
    /// Fiber radius in m; only used to report positions from the fiber axis.
    pub surface_offset: f64,
}

impl TrapPotential {
    /// Builds the trap with a given well depth `depth` (J, measured from the
    /// continuum) and minimum position `minimum` (m).
    pub fn from_depth(
        depth: f64,
        repulsive_decay_length: f64,
        attractive_decay_length: f64,
        minimum: f64,
        surface_offset: f64,
    ) -> Result<Self> {
        if !(depth > 0.0 && minimum > 0.0) {
            return Err(invalid("trap depth and minimum position must be positive"));
        }
        if !(repulsive_decay_length > 0.0 && attractive_decay_length > repulsive_decay_length) {
            return Err(invalid(
                "need 0 < repulsive decay length < attractive decay length",
            ));
        }
        let a = 2.0 / repulsive_decay_length;
        let b = 2.0 / attractive_decay_length;
        let attractive_at_min = depth / (1.0 - b / a);
        let repulsive_at_min = b * attractive_at_min / a;
        let trap = Self {
            repulsive_amplitude: repulsive_at_min * (a * minimum).exp(),
            repulsive_decay_length,
            attractive_amplitude: attractive_at_min * (b * minimum).exp(),
            attractive_decay_length,
            surface_offset,
        };
        trap.validate()?;
        Ok(trap)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.repulsive_amplitude,
            self.repulsive_decay_length,
            self.attractive_amplitude,
            self.attractive_decay_length,
        ];
        if fields.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(invalid("trap amplitudes and decay lengths must be positive"));
        }
        if !(self.surface_offset.is_finite() && self.surface_offset >= 0.0) {
            return Err(invalid("surface offset must be non-negative"));
        }
        if self.repulsive_decay_length >= self.attractive_decay_length {
            return Err(invalid("repulsive decay length must be shorter than the attractive one"));
        }
        if !(self.minimum_position() > 0.0) {
            return Err(invalid("trap minimum lies inside the fiber"));
        }
        Ok(())
    }

    fn rates(&self) -> (f64, f64) {
        (2.0 / self.repulsive_decay_length, 2.0 / self.attractive_decay_length)
    }

    /// U(r) without domain checks.
    #[inline]
    pub fn potential(&self, r: f64) -> f64 {
        let (a, b) = self.rates();
        self.repulsive_amplitude * (-a * r).exp() - self.attractive_amplitude * (-b * r).exp()
    }

    /// −dU/dr.
    #[inline]
    pub fn force(&self, r: f64) -> f64 {
        let (a, b) = self.rates();
        a * self.repulsive_amplitude * (-a * r).exp()
            - b * self.attractive_amplitude * (-b * r).exp()
    }

    pub fn curvature(&self, r: f64) -> f64 {
        let (a, b) = self.rates();
        a * a * self.repulsive_amplitude * (-a * r).exp()
            - b * b * self.attractive_amplitude * (-b * r).exp()
    }

    pub fn minimum_position(&self) -> f64 {
        let (a, b) = self.rates();
        (a * self.repulsive_amplitude / (b * self.attractive_amplitude)).ln() / (a - b)
    }

    pub fn minimum_energy(&self) -> f64 {
        self.potential(self.minimum_position())
    }

    /// Well depth below the continuum, J.
    pub fn depth(&self) -> f64 {
        -self.minimum_energy()
    }

    pub fn harmonic_angular_frequency(&self, mass: f64) -> f64 {
        (self.curvature(self.minimum_position()) / mass).sqrt()
    }

    /// Outer radius beyond which an atom counts as lost: where the potential
    /// has risen to within 10⁻⁹ of the depth of the continuum.
    pub fn bound_limit(&self) -> f64 {
        let level = -1e-9 * self.depth();
        self.outer_turning_point(level)
    }

    /// Largest r > r_min with U(r) = `energy` (requires U_min < energy < 0).
    pub(crate) fn outer_turning_point(&self, energy: f64) -> f64 {
        let r_min = self.minimum_position();
        let mut lo = r_min;
        let mut hi = r_min + self.attractive_decay_length;
        while self.potential(hi) < energy {
            hi += 10.0 * self.attractive_decay_length;
        }
        bisect(|r| self.potential(r) < energy, &mut lo, &mut hi);
        0.5 * (lo + hi)
    }

    /// Smallest r < r_min with U(r) = `energy`, or a point close to the
    /// surface if the repulsive wall never reaches that energy.
    pub(crate) fn inner_turning_point(&self, energy: f64) -> f64 {
        let r_min = self.minimum_position();
        let mut lo = r_min * 1e-6;
        let mut hi = r_min;
        if self.potential(lo) <= energy {
            return lo;
        }
        bisect(|r| self.potential(r) > energy, &mut lo, &mut hi);
        0.5 * (lo + hi)
    }
}

/// Bisects on a predicate that holds at the lower end and fails at the upper.
fn bisect(
    below: impl Fn(f64) -> bool,
    lo: &mut f64,
    hi: &mut f64,
) {
    for _ in 0..200 {
        let mid = 0.5 * (*lo + *hi);
        if mid <= *lo || mid >= *hi {
            break;
        }
        if below(mid) {
            *lo = mid;
        } else {
            *hi = mid;
        }
    }
}

/// Potential energy at radius `r` (m from the surface).
pub fn evaluate_potential(p: &TrapPotential, r: f64) -> Result<f64> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(domain(format!("radius must be positive and finite, got {r}")));
    }
    Ok(p.potential(r))
}

/// Per-atom differential phase shift as a function of radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingProfile {
    /// rad, for an atom at `reference_position`
    pub peak_phase_per_atom: f64,
    /// Intensity decay length of the probe evanescent field, m.
    pub probe_decay_length: f64,
    /// Position at which the coupling equals `peak_phase_per_atom`, m.
    pub reference_position: f64,
}

impl CouplingProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_phase_per_atom > 0.0 && self.peak_phase_per_atom.is_finite()) {
            return Err(invalid("peak phase per atom must be positive"));
        }
        if !(self.probe_decay_length > 0.0 && self.probe_decay_length.is_finite()) {
            return Err(invalid("probe decay length must be positive"));
        }
        if !(self.reference_position > 0.0 && self.reference_position.is_finite()) {
            return Err(invalid("coupling reference position must be positive"));
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, r: f64) -> f64 {
        self.peak_phase_per_atom
            * (-2.0 * (r - self.reference_position) / self.probe_decay_length).exp()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { peak_phase_per_atom: self.peak_phase_per_atom * factor, ..*self }
    }
}

pub fn coupling_strength(c: &CouplingProfile, r: f64) -> Result<f64> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(domain(format!("radius must be positive and finite, got {r}")));
    }
    c.validate()?;
    Ok(c.at(r))
}

/// Radial phase-space point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomState {
    /// m from the fiber surface
    pub position: f64,
    /// m/s
    pub velocity: f64,
}

impl AtomState {
    pub fn energy(&self, p: &TrapPotential, mass: f64) -> f64 {
        0.5 * mass * self.velocity * self.velocity + p.potential(self.position)
    }
}

/// `1 + var/mean²` of per-atom couplings (population variance).
pub fn inhomogeneity_factor(couplings: &[f64]) -> Result<f64> {
    if couplings.is_empty() {
        return Err(invalid("no couplings given"));
    }
    let n = couplings.len() as f64;
    let mean = couplings.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(domain(format!("mean coupling must be positive, got {mean}")));
    }
    let var = couplings.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    Ok(1.0 + var / (mean * mean))
}

/// Squared Lamb-Dicke parameter `ω_rec/ω_trap`.
pub fn lamb_dicke(omega_rec: f64, omega_trap: f64) -> Result<f64> {
    if !(omega_rec > 0.0 && omega_trap > 0.0) {
        return Err(domain("frequencies must be positive"));
    }
    Ok(omega_rec / omega_trap)
}
