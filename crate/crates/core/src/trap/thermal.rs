use rand::Rng;
use rand_distr::StandardNormal;

use super::{AtomState, TrapPotential};
use crate::error::{domain, Error, Result};
use crate::physics::{BOLTZMANN, CESIUM_MASS};

/// Energy window above the trap bottom (in units of k_B T) that the
/// rejection sampler covers; the Boltzmann weight beyond it is e^{−30}.
const WINDOW_KT: f64 = 30.0;
const MIN_ACCEPTANCE: f64 = 1e-3;

/// Rejection sampler for the 1-D Boltzmann distribution restricted to bound
/// states (total energy below the continuum).
///
/// Positions are proposed uniformly between the turning points of the
/// sampling window and accepted with the Boltzmann factor of the potential;
/// velocities are Maxwellian, and unbound draws are rejected.
#[derive(Debug, Clone)]
pub struct ThermalSampler {
    trap: TrapPotential,
    mass: f64,
    kt: f64,
    u_min: f64,
    r_lo: f64,
    r_hi: f64,
    acceptance: f64,
}

impl ThermalSampler {
    pub fn new(trap: &TrapPotential, mass: f64, temperature: f64) -> Result<Self> {
        trap.validate()?;
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(domain(format!("temperature must be positive, got {temperature}")));
        }
        let kt = BOLTZMANN * temperature;
        let u_min = trap.minimum_energy();
        let cut = (u_min + WINDOW_KT * kt).min(0.0);
        let r_lo = trap.inner_turning_point(cut);
        let r_hi = if cut < 0.0 { trap.outer_turning_point(cut) } else { trap.bound_limit() };
        let mut sampler =
            Self { trap: *trap, mass, kt, u_min, r_lo, r_hi, acceptance: 0.0 };
        sampler.acceptance = sampler.expected_acceptance();
        if sampler.acceptance < MIN_ACCEPTANCE {
            return Err(Error::Domain(format!(
                "bound-state sampling acceptance {:.2e} below {MIN_ACCEPTANCE:e} at {temperature} K",
                sampler.acceptance
            )));
        }
        Ok(sampler)
    }

    /// Probability that one proposal is accepted, by Simpson quadrature of
    /// the position weight times the bound fraction of the Maxwellian.
    fn expected_acceptance(&self) -> f64 {
        let n = 4000;
        let h = (self.r_hi - self.r_lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let r = self.r_lo + i as f64 * h;
            let u = self.trap.potential(r);
            let bound = if u < 0.0 { libm::erf((-u / self.kt).sqrt()) } else { 0.0 };
            let w = (-(u - self.u_min) / self.kt).exp().min(1.0) * bound;
            let coef = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += coef * w;
        }
        acc * h / 3.0 / (self.r_hi - self.r_lo)
    }

    pub fn acceptance(&self) -> f64 {
        self.acceptance
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AtomState {
        let sigma_v = (self.kt / self.mass).sqrt();
        loop {
            let r = self.r_lo + (self.r_hi - self.r_lo) * rng.random::<f64>();
            let u = self.trap.potential(r);
            if rng.random::<f64>() >= (-(u - self.u_min) / self.kt).exp() {
                continue;
            }
            let v = sigma_v * rng.sample::<f64, _>(StandardNormal);
            if u + 0.5 * self.mass * v * v >= 0.0 {
                continue;
            }
            return AtomState { position: r, velocity: v };
        }
    }
}

/// Draws one bound cesium atom from the thermal distribution at `temperature`
/// (K).
pub fn sample_thermal_state<R: Rng + ?Sized>(
    p: &TrapPotential,
    temperature: f64,
    rng: &mut R,
) -> Result<AtomState> {
    Ok(ThermalSampler::new(p, CESIUM_MASS, temperature)?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Domain};

    fn trap() -> TrapPotential {
        TrapPotential::from_depth(BOLTZMANN * 250e-6, 50e-9, 1000e-9, 230e-9, 250e-9).unwrap()
    }

    #[test]
    fn equipartition_in_the_harmonic_limit() {
        let t = 2e-6;
        let s = ThermalSampler::new(&trap(), CESIUM_MASS, t).unwrap();
        let mut rng = substream(1, Domain::Test, 0);
        let n = 40_000;
        let ke: f64 = (0..n)
            .map(|_| {
                let a = s.sample(&mut rng);
                0.5 * CESIUM_MASS * a.velocity * a.velocity
            })
            .sum::<f64>()
            / n as f64;
        let target = 0.5 * BOLTZMANN * t;
        // standard error of the mean of a χ²₁-distributed energy is √2/√n
        assert!((ke / target - 1.0).abs() < 5.0 * (2.0f64 / n as f64).sqrt());
    }

    #[test]
    fn zero_temperature_limit_collapses_onto_the_minimum() {
        let p = trap();
        let s = ThermalSampler::new(&p, CESIUM_MASS, 1e-12).unwrap();
        let mut rng = substream(2, Domain::Test, 0);
        for _ in 0..100 {
            let a = s.sample(&mut rng);
            assert!((a.position - p.minimum_position()).abs() < 1e-10);
            assert!(a.velocity.abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_non_positive_and_absurd_temperatures() {
        assert!(ThermalSampler::new(&trap(), CESIUM_MASS, 0.0).is_err());
        assert!(ThermalSampler::new(&trap(), CESIUM_MASS, -1.0).is_err());
        assert!(ThermalSampler::new(&trap(), CESIUM_MASS, 10.0).is_err());
        let warm = ThermalSampler::new(&trap(), CESIUM_MASS, 120e-6).unwrap();
        assert!(warm.acceptance() > 1e-2);
    }

    #[test]
    fn samples_are_bound_and_reproducible() {
        let p = trap();
        let s = ThermalSampler::new(&p, CESIUM_MASS, 150e-6).unwrap();
        let a: Vec<AtomState> =
            (0..200).map(|i| s.sample(&mut substream(3, Domain::Test, i))).collect();
        let b: Vec<AtomState> =
            (0..200).map(|i| s.sample(&mut substream(3, Domain::Test, i))).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|x| x.position > 0.0 && x.energy(&p, CESIUM_MASS) < 0.0));
    }
}
