//! Physical constants (CODATA 2018) and cesium D2 line data.

use std::f64::consts::PI;

pub const BOLTZMANN: f64 = 1.380_649e-23;
pub const HBAR: f64 = 1.054_571_817e-34;
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;

/// Mass of a 133Cs atom in kg.
pub const CESIUM_MASS: f64 = 132.905_451_933 * ATOMIC_MASS_UNIT;

/// Vacuum wavelength of the cesium D2 line in m.
pub const CESIUM_D2_WAVELENGTH: f64 = 852.347_275_82e-9;

/// Recoil angular frequency ħk²/2m for light of the given wavelength.
pub fn recoil_angular_frequency(wavelength: f64, mass: f64) -> f64 {
    let k = 2.0 * PI / wavelength;
    HBAR * k * k / (2.0 * mass)
}

pub const MICRO: f64 = 1e-6;
pub const NANO: f64 = 1e-9;
pub const MILLI: f64 = 1e-3;
