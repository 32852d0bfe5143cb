//! CODATA 2018 physical constants in SI units.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    /// Elementary charge (C).
    pub e: f64,
    /// Vacuum permittivity (F/m).
    pub epsilon0: f64,
    /// Boltzmann constant (J/K).
    pub k_b: f64,
    /// Atomic mass unit (kg).
    pub u: f64,
    /// Coulomb coupling e^2 / (4 pi epsilon0) (J m).
    pub alpha: f64,
}

impl PhysicalConstants {
    pub const fn codata2018() -> Self {
        const E: f64 = 1.602_176_634e-19;
        const EPS0: f64 = 8.854_187_812_8e-12;
        Self {
            e: E,
            epsilon0: EPS0,
            k_b: 1.380_649e-23,
            u: 1.660_539_066_60e-27,
            alpha: E * E / (4.0 * std::f64::consts::PI * EPS0),
        }
    }
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self::codata2018()
    }
}

pub const CONSTANTS: PhysicalConstants = PhysicalConstants::codata2018();

/// Energy in joules expressed as a temperature in millikelvin.
pub fn joules_to_mk(energy: f64) -> f64 {
    energy / CONSTANTS.k_b * 1e3
}

pub fn mk_to_joules(mk: f64) -> f64 {
    mk * 1e-3 * CONSTANTS.k_b
}

/// Angular frequency (rad/s) to cyclic frequency in kHz.
pub fn angular_to_khz(omega: f64) -> f64 {
    omega / (2.0 * std::f64::consts::PI) / 1e3
}

pub fn khz_to_angular(khz: f64) -> f64 {
    khz * 1e3 * 2.0 * std::f64::consts::PI
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_matches_definition() {
        let c = PhysicalConstants::default();
        let alpha = c.e * c.e / (4.0 * std::f64::consts::PI * c.epsilon0);
        assert!((c.alpha - alpha).abs() <= f64::EPSILON * alpha);
        assert!((c.alpha - 2.307_077e-28).abs() < 1e-33);
    }

    #[test]
    fn unit_roundtrips() {
        assert!((mk_to_joules(joules_to_mk(3.2e-25)) - 3.2e-25).abs() < 1e-38);
        assert!((angular_to_khz(khz_to_angular(116.0)) - 116.0).abs() < 1e-12);
    }
}
