//! Simulated melting curves: barrier fits over a sweep of `omega_y /
//! omega_z`, from which thermal densities, correlation amplitudes and
//! spreads follow at any temperature.

use serde::{Deserialize, Serialize};

use crate::analysis::{correlate, fit_angular_spread, AngularDensity, SpreadOutcome, C_THRESHOLD, THETA_BINS};
use crate::barrier::{
    barrier_for_crystal, default_psf_sigma, thermal_angular_density, thermal_eccentric_density, BarrierFit, BarrierSettings,
    CrystalSpec, ThermalParameters,
};
use crate::error::{Error, Result};
use crate::groundstate::{describe_shells, Ellipse, MinimizationResult};
use crate::trap::{IonSpecies, TrapCalibration, TrapModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub ratio: f64,
    pub v_dc: f64,
    pub trap: TrapModel,
    pub ground: MinimizationResult,
    /// Ions per shell, innermost first.
    pub occupancy: Vec<usize>,
    pub outer_ellipse: Option<Ellipse>,
    pub fit: BarrierFit,
    /// Polar angle of the constrained ion in the ground state; barrier
    /// angles are measured from it.
    pub origin: f64,
}

impl SweepPoint {
    pub fn n_t(&self) -> usize {
        self.fit.n_t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub ratio: f64,
    pub error: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeltingSimulator {
    pub points: Vec<SweepPoint>,
    pub failures: Vec<SweepFailure>,
    pub bins: usize,
    /// Angular blur (rad); `None` uses the default for each shell size.
    pub psf_sigma: Option<f64>,
}

impl MeltingSimulator {
    /// Computes ground state, constrained-rotation curve and barrier fit at
    /// each ratio. Ratios that fail are recorded and skipped.
    pub fn build(
        crystal: &CrystalSpec,
        calibration: &TrapCalibration,
        q_y: f64,
        ratios: &[f64],
        seed: u64,
        settings: &BarrierSettings,
    ) -> Self {
        let reference = IonSpecies::new("ref", calibration.reference_mass_u, true).expect("calibration mass is positive");
        let mut points = Vec::new();
        let mut failures = Vec::new();
        for &ratio in ratios {
            let point = calibration.trap_for_ratio(ratio, q_y, &reference).and_then(|(v_dc, trap)| {
                let (ground, curve, fit) = barrier_for_crystal(crystal, &trap, seed, settings)?;
                let summary = describe_shells(&ground.config);
                Ok(SweepPoint {
                    ratio,
                    v_dc,
                    trap,
                    occupancy: summary.shells.occupancy(),
                    outer_ellipse: summary.outer_ellipse,
                    ground,
                    fit,
                    origin: curve.origin,
                })
            });
            match point {
                Ok(p) => points.push(p),
                Err(e) => failures.push(SweepFailure { ratio, exit_code: e.exit_code(), error: e.to_string() }),
            }
        }
        Self { points, failures, bins: THETA_BINS, psf_sigma: None }
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.ratio).collect()
    }

    fn thermal(&self, point: &SweepPoint, temperature: f64) -> Result<ThermalParameters> {
        ThermalParameters::new(temperature, self.psf_sigma.unwrap_or_else(|| default_psf_sigma(point.n_t())))
    }

    /// Thermal density of the outer shell over the polar angle.
    pub fn density(&self, index: usize, temperature: f64) -> Result<AngularDensity> {
        let point = self.points.get(index).ok_or_else(|| Error::InvalidInput(format!("no sweep point {index}")))?;
        thermal_angular_density(&point.fit, &self.thermal(point, temperature)?, self.bins)
    }

    /// The density as an image of the shell records it, over the
    /// eccentric angle of the fitted barrier.
    pub fn profile(&self, index: usize, temperature: f64) -> Result<AngularDensity> {
        let point = self.points.get(index).ok_or_else(|| Error::InvalidInput(format!("no sweep point {index}")))?;
        thermal_eccentric_density(&point.fit, &self.thermal(point, temperature)?, self.bins)
    }

    /// `(ratio, C)` for every successful point, from [`Self::profile`].
    pub fn correlation_curve(&self, temperature: f64) -> Result<Vec<(f64, f64)>> {
        (0..self.points.len())
            .map(|i| Ok((self.points[i].ratio, correlate(&self.profile(i, temperature)?, self.points[i].n_t())?.c)))
            .collect()
    }

    pub fn spread(&self, index: usize, temperature: f64) -> Result<SpreadOutcome> {
        let profile = self.profile(index, temperature)?;
        fit_angular_spread(&profile, self.points[index].n_t(), C_THRESHOLD)
    }
}
