//! Rotation barrier of the outer shell: constrained-rotation energy curves,
//! the periodic fit in the eccentric angle, and Boltzmann angular densities.
//!
//! Angles are polar angles in the `(z, y)` plane measured from z towards y.
//! An elliptical shell with semi-axes `R_y0`, `R_z0` has its ions equally
//! spaced in the eccentric angle `theta_E`, related to the polar angle by
//! `tan(theta) = eta tan(theta_E)` with `eta = R_y0 / R_z0`.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::AngularDensity;
use crate::constants::CONSTANTS;
use crate::energy;
use crate::error::{Error, Result};
use crate::groundstate::{
    describe_shells, find_ground_state_with, move_species_inward, snap_to_ray, stiffness_for, GridSpec, GridState, MinimizationResult,
    MinimizerSettings, RayConstraint,
};
use crate::numeric::{linear_least_squares, linspace, scan_then_golden};
use crate::trap::{IonSpecies, TrapModel};

/// Samples per period of the default theta grid.
pub const DEFAULT_THETA_POINTS: usize = 25;

/// Curves whose peak-to-peak energy is below this (J, about 10 uK) are
/// treated as flat.
pub const FLAT_CURVE_FLOOR: f64 = 1.380649e-28;

const ETA_RANGE: (f64, f64) = (0.3, 3.0);
/// With a shell aspect ratio available, eta is searched within this factor
/// of it. One period of polar samples leaves eta poorly determined, and far
/// from the shell geometry the model extrapolates over unsampled angles.
pub const ETA_HINT_FACTOR: f64 = 1.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierCurve {
    /// Rotation angle relative to `origin` (rad), strictly increasing.
    pub theta: Vec<f64>,
    /// Energy above the curve minimum (J).
    pub energy: Vec<f64>,
    pub constrained_ion: usize,
    pub pinned: Vec<usize>,
    pub n_t: usize,
    /// Ground-state polar angle of the constrained ion (rad).
    pub origin: f64,
    /// Aspect ratio `R_y0 / R_z0` of the rotating shell, when known.
    pub eta_hint: Option<f64>,
}

impl BarrierCurve {
    /// Builds a curve from raw energies, subtracting their minimum.
    pub fn new(theta: Vec<f64>, energy: Vec<f64>, n_t: usize, origin: f64) -> Result<Self> {
        if theta.len() != energy.len() || theta.is_empty() {
            return Err(Error::InvalidInput("theta and energy must be non-empty and equally long".into()));
        }
        if theta.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("theta must be strictly increasing".into()));
        }
        if energy.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidInput("energies must be finite".into()));
        }
        if n_t < 2 {
            return Err(Error::InvalidInput(format!("rotating shell needs at least 2 ions, got {n_t}")));
        }
        let min = energy.iter().cloned().fold(f64::INFINITY, f64::min);
        let energy = energy.into_iter().map(|e| e - min).collect();
        Ok(Self { theta, energy, constrained_ion: 0, pinned: Vec::new(), n_t, origin, eta_hint: None })
    }

    /// Absolute polar angles of the constrained ion.
    pub fn absolute_theta(&self) -> Vec<f64> {
        self.theta.iter().map(|t| t + self.origin).collect()
    }

    pub fn amplitude(&self) -> f64 {
        let max = self.energy.iter().cloned().fold(0.0, f64::max);
        let min = self.energy.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }
}

/// Default theta grid: `points` uniform samples over `[0, 2 pi / n_t]`.
pub fn theta_grid(n_t: usize, points: usize) -> Vec<f64> {
    linspace(0.0, TAU / n_t as f64, points)
}

/// Terms of the periodic model kept in a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BarrierModel {
    /// `a + b cos u + c cos^3 u + d cos^4 u + e cos^5 u`.
    Full,
    /// `a + b cos u`.
    Cosine,
}

impl BarrierModel {
    fn powers(self) -> &'static [i32] {
        match self {
            Self::Full => &[0, 1, 3, 4, 5],
            Self::Cosine => &[0, 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierFit {
    pub eta: f64,
    pub phi: f64,
    /// `(a, b, c, d, e)` in joules; unused terms are zero.
    pub coeffs: [f64; 5],
    pub n_t: usize,
    /// Peak-to-peak height of the fitted curve (J).
    pub v_b: f64,
    /// RMS residual of the fit (J).
    pub rms_residual: f64,
}

impl BarrierFit {
    /// Model energy at eccentric angle `theta_e`.
    pub fn energy_eccentric(&self, theta_e: f64) -> f64 {
        model_value(&self.coeffs, (self.n_t as f64 * theta_e + self.phi).cos())
    }

    /// Model energy at absolute polar angle `theta`.
    pub fn energy_at(&self, theta: f64) -> f64 {
        self.energy_eccentric(eccentric_angle(theta, self.eta))
    }

    fn minimum(&self) -> f64 {
        (0..=2000)
            .map(|k| model_value(&self.coeffs, (PI * k as f64 / 1000.0).cos()))
            .fold(f64::INFINITY, f64::min)
    }
}

fn model_value(coeffs: &[f64; 5], c: f64) -> f64 {
    coeffs[0] + coeffs[1] * c + coeffs[2] * c.powi(3) + coeffs[3] * c.powi(4) + coeffs[4] * c.powi(5)
}

/// Eccentric angle for polar angle `theta`: `tan(theta_E) = tan(theta) / eta`,
/// on the same branch as `theta`.
pub fn eccentric_angle(theta: f64, eta: f64) -> f64 {
    let base = (theta.sin() / eta).atan2(theta.cos());
    theta + crate::analysis::wrap_pi(base - theta)
}

/// Polar angle for eccentric angle `theta_e`.
pub fn polar_angle(theta_e: f64, eta: f64) -> f64 {
    eccentric_angle(theta_e, 1.0 / eta)
}

/// `d theta_E / d theta` at polar angle `theta`.
pub fn eccentric_jacobian(theta: f64, eta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    eta / (eta * eta * c * c + s * s)
}

/// Re-expresses a density over the eccentric angle as one over the polar
/// angle, on the same bins, normalized to unit sum.
pub fn eccentric_to_polar(density: &AngularDensity, eta: f64) -> AngularDensity {
    let bins = density.bins();
    let values = (0..bins)
        .map(|k| {
            let theta = density.angle(k);
            density.interpolate(eccentric_angle(theta, eta)) * eccentric_jacobian(theta, eta)
        })
        .collect();
    AngularDensity { values }.normalized()
}

/// Inverse of [`eccentric_to_polar`].
pub fn polar_to_eccentric(density: &AngularDensity, eta: f64) -> AngularDensity {
    let bins = density.bins();
    let values = (0..bins)
        .map(|k| {
            let theta_e = density.angle(k);
            let theta = polar_angle(theta_e, eta);
            density.interpolate(theta) / eccentric_jacobian(theta, eta)
        })
        .collect();
    AngularDensity { values }.normalized()
}

/// Reruns the grid descent once per theta, with the outer-shell ion nearest
/// angle 0 held on the ray at its ground angle plus theta, all other ions
/// starting from the ground state rigidly rotated by theta. With
/// `pin_inner`, inner-shell ions stay at their ground cells. Point `k` uses
/// seed `seed + k`.
pub fn rotation_energy_curve(
    ground: &MinimizationResult,
    trap: &TrapModel,
    theta: &[f64],
    pin_inner: bool,
    grid: &GridSpec,
    seed: u64,
) -> Result<BarrierCurve> {
    rotation_energy_curve_with(ground, trap, theta, pin_inner, grid, seed, MinimizerSettings::default().max_moves)
}

pub fn rotation_energy_curve_with(
    ground: &MinimizationResult,
    trap: &TrapModel,
    theta: &[f64],
    pin_inner: bool,
    grid: &GridSpec,
    seed: u64,
    max_moves: usize,
) -> Result<BarrierCurve> {
    grid.validate()?;
    let config = &ground.config;
    let summary = describe_shells(config);
    let outer = summary.shells.outer().to_vec();
    let n_t = outer.len();
    if n_t < 2 {
        return Err(Error::DegenerateShell { count: n_t });
    }
    let period = TAU / n_t as f64;
    if theta.iter().any(|t| *t < -1e-12 || *t > period + 1e-12) {
        return Err(Error::InvalidInput("theta grid must lie within one period".into()));
    }
    let constrained = *outer
        .iter()
        .min_by(|&&a, &&b| {
            let (da, db) = (config.ions[a].angle().abs(), config.ions[b].angle().abs());
            da.total_cmp(&db).then(a.cmp(&b))
        })
        .expect("outer shell is non-empty");
    let origin = config.ions[constrained].angle();
    let pinned = if pin_inner { summary.shells.inner_ions() } else { Vec::new() };
    let species = config.species();
    let stiffness = stiffness_for(&species, trap)?;
    let cell = grid.cell;

    let point = |k: usize, t: f64| -> Result<f64> {
        let rotated = config.rotated(t);
        let start: Vec<[i64; 2]> = (0..config.len())
            .map(|i| {
                let ion = if pinned.contains(&i) { &config.ions[i] } else { &rotated.ions[i] };
                if i == constrained {
                    let r = ion.y.hypot(ion.z) / cell;
                    snap_to_ray(r, origin + t)
                } else {
                    [(ion.y / cell).round() as i64, (ion.z / cell).round() as i64]
                }
            })
            .collect();
        let mut state = GridState::new(grid, stiffness.clone(), start);
        for &i in &pinned {
            state.freeze(i);
        }
        state.constrain(RayConstraint { ion: constrained, angle: origin + t });
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        state.descend(&mut rng, max_moves, k, |_| {})?;
        Ok(energy::energy_with_stiffness(&state.to_configuration(&species), &stiffness))
    };

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(theta.len()).max(1);
    let mut results: Vec<Option<Result<f64>>> = (0..theta.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        for (w, chunk) in results.chunks_mut(theta.len().div_ceil(workers)).enumerate() {
            let start = w * theta.len().div_ceil(workers);
            let point = &point;
            s.spawn(move || {
                for (j, slot) in chunk.iter_mut().enumerate() {
                    let k = start + j;
                    *slot = Some(point(k, theta[k]));
                }
            });
        }
    });
    let energies = results.into_iter().map(|r| r.expect("every theta evaluated")).collect::<Result<Vec<_>>>()?;

    let mut curve = BarrierCurve::new(theta.to_vec(), energies, n_t, origin)?;
    curve.constrained_ion = constrained;
    curve.pinned = pinned;
    curve.eta_hint = summary.outer_ellipse.map(|e| e.aspect_ratio());
    Ok(curve)
}

/// Fits the full periodic model; see [`fit_barrier_model`].
pub fn fit_barrier(curve: &BarrierCurve) -> Result<BarrierFit> {
    fit_barrier_model(curve, BarrierModel::Full)
}

/// Least squares over `eta`, `phi` and the linear coefficients, with the
/// model evaluated at `u = n_t theta_E + phi`. `eta` and `phi` are each
/// found by a coarse scan refined with golden-section search; the
/// coefficients are solved linearly for every trial pair. See
/// [`eta_search_range`] for the eta bounds.
pub fn fit_barrier_model(curve: &BarrierCurve, model: BarrierModel) -> Result<BarrierFit> {
    let n = curve.theta.len();
    if n < 12 {
        return Err(Error::InvalidInput(format!("barrier fit needs at least 12 samples, got {n}")));
    }
    let amplitude = curve.amplitude();
    if amplitude < FLAT_CURVE_FLOOR {
        return Ok(flat_fit(curve));
    }
    let (lo, hi) = eta_search_range(curve);
    let profile = |eta: f64| eta_profile(curve, model, amplitude, eta);
    let (ln_eta, _) = scan_then_golden(|ln_eta| profile(ln_eta.exp()).2, lo.ln(), hi.ln(), 41, 1e-9);
    finish_fit(curve, model, amplitude, ln_eta.exp())
}

/// Bounds of the eta search: the full range, narrowed around the curve's
/// shell aspect ratio when it has one.
pub fn eta_search_range(curve: &BarrierCurve) -> (f64, f64) {
    match curve.eta_hint {
        Some(h) if h.is_finite() && h > 0.0 => {
            let lo = (h / ETA_HINT_FACTOR).clamp(ETA_RANGE.0, ETA_RANGE.1);
            let hi = (h * ETA_HINT_FACTOR).clamp(ETA_RANGE.0, ETA_RANGE.1);
            if hi > lo {
                (lo, hi)
            } else {
                ETA_RANGE
            }
        }
        _ => ETA_RANGE,
    }
}

/// Fit with `eta` held fixed; `phi` and the coefficients are still free.
pub fn fit_barrier_fixed_eta(curve: &BarrierCurve, model: BarrierModel, eta: f64) -> Result<BarrierFit> {
    let n = curve.theta.len();
    if n < 12 {
        return Err(Error::InvalidInput(format!("barrier fit needs at least 12 samples, got {n}")));
    }
    if !(eta > 0.0) {
        return Err(Error::InvalidInput(format!("eta must be positive, got {eta}")));
    }
    let amplitude = curve.amplitude();
    if amplitude < FLAT_CURVE_FLOOR {
        return Ok(flat_fit(curve));
    }
    finish_fit(curve, model, amplitude, eta)
}

fn flat_fit(curve: &BarrierCurve) -> BarrierFit {
    let n = curve.energy.len() as f64;
    let mean = curve.energy.iter().sum::<f64>() / n;
    let rms = (curve.energy.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    BarrierFit { eta: 1.0, phi: 0.0, coeffs: [mean, 0.0, 0.0, 0.0, 0.0], n_t: curve.n_t, v_b: 0.0, rms_residual: rms }
}

/// Linear solve at fixed `(eta, phi)` on energies scaled by `amplitude`.
fn solve_linear(curve: &BarrierCurve, model: BarrierModel, amplitude: f64, eta: f64, phi: f64) -> Option<(DVector<f64>, f64)> {
    let n = curve.theta.len();
    let powers = model.powers();
    let design = DMatrix::from_fn(n, powers.len(), |i, j| {
        let u = curve.n_t as f64 * eccentric_angle(curve.theta[i] + curve.origin, eta) + phi;
        u.cos().powi(powers[j])
    });
    let data = DVector::from_iterator(n, curve.energy.iter().map(|e| e / amplitude));
    let x = linear_least_squares(&design, &data)?;
    let sse = (&design * &x - &data).norm_squared();
    Some((x, sse))
}

/// Best `phi` at fixed `eta`: `(phi, coefficients, sse)`. `phi` and
/// `phi + pi` describe the same family, so only `[0, pi]` is searched.
fn eta_profile(curve: &BarrierCurve, model: BarrierModel, amplitude: f64, eta: f64) -> (f64, Option<DVector<f64>>, f64) {
    let sse = |phi: f64| solve_linear(curve, model, amplitude, eta, phi).map_or(f64::INFINITY, |(_, s)| s);
    let (phi, best) = scan_then_golden(sse, 0.0, PI, 37, 1e-10);
    let x = solve_linear(curve, model, amplitude, eta, phi).map(|(x, _)| x);
    (phi, x, best)
}

fn finish_fit(curve: &BarrierCurve, model: BarrierModel, amplitude: f64, eta: f64) -> Result<BarrierFit> {
    let n = curve.theta.len();
    let n_t = curve.n_t;
    let powers = model.powers();
    let (phi, x, residual) = eta_profile(curve, model, amplitude, eta);
    let x = x.ok_or_else(|| Error::FitFailed("singular barrier design matrix".into()))?;
    let mut coeffs = [0.0; 5];
    for (j, p) in powers.iter().enumerate() {
        let slot = match p {
            0 => 0,
            1 => 1,
            3 => 2,
            4 => 3,
            _ => 4,
        };
        coeffs[slot] = x[j] * amplitude;
    }
    let rms_residual = (residual / n as f64).sqrt() * amplitude;
    if rms_residual > 0.1 * amplitude {
        return Err(Error::FitFailed(format!(
            "barrier fit residual {rms_residual:.3e} J exceeds 10% of the curve amplitude {amplitude:.3e} J"
        )));
    }
    let mut fit = BarrierFit { eta, phi, coeffs, n_t, v_b: 0.0, rms_residual };
    let max = (0..=2000)
        .map(|k| model_value(&fit.coeffs, (PI * k as f64 / 1000.0).cos()))
        .fold(f64::NEG_INFINITY, f64::max);
    fit.v_b = (max - fit.minimum()).max(0.0);
    Ok(fit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalParameters {
    /// Kelvin.
    pub temperature: f64,
    /// Angular blur of the imaging system (rad).
    pub psf_sigma: f64,
}

impl ThermalParameters {
    pub fn new(temperature: f64, psf_sigma: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidInput(format!("temperature must be positive, got {temperature}")));
        }
        if !(psf_sigma >= 0.0) || !psf_sigma.is_finite() {
            return Err(Error::InvalidInput(format!("psf sigma must be non-negative, got {psf_sigma}")));
        }
        Ok(Self { temperature, psf_sigma })
    }

    /// Blur of `0.3 (2 pi / (8 n_t))`.
    pub fn with_default_psf(temperature: f64, n_t: usize) -> Result<Self> {
        Self::new(temperature, default_psf_sigma(n_t))
    }

    /// Angular kinetic energy `k_B T` (J).
    pub fn energy(&self) -> f64 {
        CONSTANTS.k_b * self.temperature
    }
}

pub fn default_psf_sigma(n_t: usize) -> f64 {
    0.3 * TAU / (8 * n_t) as f64
}

/// Boltzmann density of the shell ions over the polar angle: the weight
/// `sum_k exp(-V(theta_E + 2 pi k / n_t) / k_B T)` over the eccentric angle,
/// mapped to the polar angle with its Jacobian, blurred and normalized.
pub fn thermal_angular_density(fit: &BarrierFit, thermal: &ThermalParameters, bins: usize) -> Result<AngularDensity> {
    let weight = boltzmann_weight(fit, thermal, bins)?;
    let values = (0..bins)
        .map(|k| {
            let theta = crate::analysis::bin_angle(k, bins);
            weight(eccentric_angle(theta, fit.eta)) * eccentric_jacobian(theta, fit.eta)
        })
        .collect();
    Ok(AngularDensity { values }.blurred(thermal.psf_sigma).normalized())
}

/// The same Boltzmann weight binned directly over the eccentric angle,
/// blurred and normalized. This is the profile an image of the shell
/// yields along its De La Hire angle.
pub fn thermal_eccentric_density(fit: &BarrierFit, thermal: &ThermalParameters, bins: usize) -> Result<AngularDensity> {
    let weight = boltzmann_weight(fit, thermal, bins)?;
    let values = (0..bins).map(|k| weight(crate::analysis::bin_angle(k, bins))).collect();
    Ok(AngularDensity { values }.blurred(thermal.psf_sigma).normalized())
}

fn boltzmann_weight<'a>(
    fit: &'a BarrierFit,
    thermal: &ThermalParameters,
    bins: usize,
) -> Result<impl Fn(f64) -> f64 + 'a> {
    if bins < 8 * fit.n_t {
        return Err(Error::InvalidInput(format!("need at least {} bins, got {bins}", 8 * fit.n_t)));
    }
    let kt = thermal.energy();
    let v_min = fit.minimum();
    let spacing = TAU / fit.n_t as f64;
    Ok(move |theta_e: f64| -> f64 {
        (0..fit.n_t)
            .map(|k| (-(fit.energy_eccentric(theta_e + spacing * k as f64) - v_min) / kt).exp())
            .sum()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierPoint {
    pub n: usize,
    pub v_b: f64,
    /// Ions per shell, innermost first.
    pub occupancy: Vec<usize>,
    pub fit: BarrierFit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierSettings {
    pub grid: GridSpec,
    pub minimizer: MinimizerSettings,
    pub theta_points: usize,
}

impl Default for BarrierSettings {
    fn default() -> Self {
        Self { grid: GridSpec::default(), minimizer: MinimizerSettings::default(), theta_points: DEFAULT_THETA_POINTS }
    }
}

/// Ions of a crystal and how its barrier is computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrystalSpec {
    pub species: Vec<IonSpecies>,
    /// Freeze inner-shell ions during the rotation.
    pub pin_inner: bool,
    /// Ion whose species is moved into the inner shell after minimization.
    pub inner_impurity: Option<usize>,
}

impl CrystalSpec {
    pub fn uniform(species: IonSpecies, n: usize, pin_inner: bool) -> Self {
        Self { species: vec![species; n], pin_inner, inner_impurity: None }
    }
}

/// Ground state, constrained rotation and fit for one crystal.
pub fn barrier_for(
    species: &[IonSpecies],
    trap: &TrapModel,
    pin_inner: bool,
    seed: u64,
    settings: &BarrierSettings,
) -> Result<(MinimizationResult, BarrierCurve, BarrierFit)> {
    let crystal = CrystalSpec { species: species.to_vec(), pin_inner, inner_impurity: None };
    barrier_for_crystal(&crystal, trap, seed, settings)
}

pub fn barrier_for_crystal(
    crystal: &CrystalSpec,
    trap: &TrapModel,
    seed: u64,
    settings: &BarrierSettings,
) -> Result<(MinimizationResult, BarrierCurve, BarrierFit)> {
    let mut ground = find_ground_state_with(&crystal.species, trap, &settings.grid, seed, &settings.minimizer)?;
    if let Some(ion) = crystal.inner_impurity {
        ground = move_species_inward(&ground, ion, trap)?;
    }
    let n_t = describe_shells(&ground.config).shells.outer().len();
    if n_t < 2 {
        return Err(Error::DegenerateShell { count: n_t });
    }
    let curve = rotation_energy_curve_with(
        &ground,
        trap,
        &theta_grid(n_t, settings.theta_points),
        crystal.pin_inner,
        &settings.grid,
        seed,
        settings.minimizer.max_moves,
    )?;
    let fit = fit_barrier(&curve)?;
    Ok((ground, curve, fit))
}

pub fn barrier_vs_n(ns: &[usize], trap: &TrapModel, pin_inner: bool, seed: u64) -> Result<Vec<BarrierPoint>> {
    barrier_vs_n_with(ns, trap, pin_inner, seed, &BarrierSettings::default())
}

/// Barrier of the outer shell for each ion count, all ions of the trap's
/// reference species.
pub fn barrier_vs_n_with(
    ns: &[usize],
    trap: &TrapModel,
    pin_inner: bool,
    seed: u64,
    settings: &BarrierSettings,
) -> Result<Vec<BarrierPoint>> {
    let species = IonSpecies::new("ref", trap.reference_mass_u, true)?;
    ns.iter()
        .map(|&n| {
            if !(3..=30).contains(&n) {
                return Err(Error::InvalidInput(format!("ion count must be in 3..=30, got {n}")));
            }
            let (ground, _, fit) = barrier_for(&vec![species.clone(); n], trap, pin_inner, seed, settings)?;
            let occupancy = describe_shells(&ground.config).shells.occupancy();
            Ok(BarrierPoint { n, v_b: fit.v_b, occupancy, fit })
        })
        .collect()
}
