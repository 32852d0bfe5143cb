//! Angular correlations, modulation amplitude, multi-gaussian spread and the
//! temperature fit against simulated correlation curves.

use std::f64::consts::{PI, TAU};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::levenberg_marquardt;

/// Angular bins used for profiles and densities (1 degree).
pub const THETA_BINS: usize = 360;

/// Correlation amplitude at or below which no modulation is considered visible.
pub const C_THRESHOLD: f64 = 4e-4;

/// Non-negative density sampled at `theta_k = 2 pi k / bins`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngularDensity {
    pub values: Vec<f64>,
}

impl AngularDensity {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("angular density must be finite and non-negative".into()));
        }
        if !values.iter().any(|v| *v > 0.0) {
            return Err(Error::EmptyDensity);
        }
        Ok(Self { values })
    }

    pub fn uniform(bins: usize) -> Self {
        Self { values: vec![1.0 / bins as f64; bins] }
    }

    /// Builds a density from a function of angle, evaluated at bin angles.
    pub fn from_fn(bins: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new((0..bins).map(|k| f(bin_angle(k, bins))).collect())
    }

    pub fn bins(&self) -> usize {
        self.values.len()
    }

    pub fn angle(&self, k: usize) -> f64 {
        bin_angle(k, self.bins())
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn normalized(&self) -> Self {
        let t = self.total();
        Self { values: self.values.iter().map(|v| v / t).collect() }
    }

    /// Circular convolution with a unit-sum gaussian of width `sigma` (rad).
    pub fn blurred(&self, sigma: f64) -> Self {
        let n = self.bins();
        let step = TAU / n as f64;
        if sigma < 1e-3 * step {
            return self.clone();
        }
        let kernel: Vec<f64> = (0..n)
            .map(|k| {
                let d = wrap_pi(k as f64 * step);
                (-0.5 * (d / sigma).powi(2)).exp()
            })
            .collect();
        let norm: f64 = kernel.iter().sum();
        let values = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| self.values[j] * kernel[(i + n - j) % n])
                    .sum::<f64>()
                    / norm
            })
            .collect();
        Self { values }
    }

    /// Linear interpolation at an arbitrary angle, periodic in `2 pi`.
    pub fn interpolate(&self, theta: f64) -> f64 {
        let n = self.bins();
        let x = theta.rem_euclid(TAU) / TAU * n as f64;
        let k = x.floor() as usize % n;
        let f = x - x.floor();
        self.values[k] * (1.0 - f) + self.values[(k + 1) % n] * f
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["theta_rad", "density"])?;
        for (k, v) in self.values.iter().enumerate() {
            w.write_record([format!("{:.9}", self.angle(k)), format!("{v:.9e}")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let mut values = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let v: f64 = rec
                .get(1)
                .ok_or_else(|| Error::InvalidInput("density CSV needs two columns".into()))?
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput("density CSV value is not a number".into()))?;
            values.push(v);
        }
        Self::new(values)
    }
}

pub fn bin_angle(k: usize, bins: usize) -> f64 {
    TAU * k as f64 / bins as f64
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_pi(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    /// `g` at `dtheta_k = 2 pi k / bins`.
    pub g: Vec<f64>,
    /// Modulation amplitude at harmonic `n_t`.
    pub c: f64,
    pub n_t: usize,
}

/// `g(dtheta) = (sum n(theta) n(theta + dtheta) - sum n^2) / sum n^2` with
/// circular shifts.
pub fn angular_correlation(n: &AngularDensity) -> Result<Vec<f64>> {
    let v = &n.values;
    let len = v.len();
    let norm: f64 = v.iter().map(|x| x * x).sum();
    if !(norm > 0.0) {
        return Err(Error::EmptyDensity);
    }
    Ok((0..len)
        .map(|shift| {
            let cross: f64 = (0..len).map(|i| v[i] * v[(i + shift) % len]).sum();
            (cross - norm) / norm
        })
        .collect())
}

/// Magnitude of the discrete Fourier component of `g` at harmonic `n_t`,
/// scaled so that `A cos(n_t dtheta)` yields `A`.
pub fn correlation_amplitude(g: &[f64], n_t: usize) -> f64 {
    let (re, im) = fourier_component(g, n_t);
    2.0 * re.hypot(im) / g.len() as f64
}

fn fourier_component(x: &[f64], k: usize) -> (f64, f64) {
    let n = x.len() as f64;
    x.iter().enumerate().fold((0.0, 0.0), |(re, im), (j, v)| {
        let a = TAU * (k * j) as f64 / n;
        (re + v * a.cos(), im - v * a.sin())
    })
}

pub fn correlate(n: &AngularDensity, n_t: usize) -> Result<CorrelationResult> {
    if n_t < 2 {
        return Err(Error::InvalidInput(format!("shell size must be at least 2, got {n_t}")));
    }
    let g = angular_correlation(n)?;
    let c = correlation_amplitude(&g, n_t);
    Ok(CorrelationResult { g, c, n_t })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadFit {
    /// Common gaussian width (rad).
    pub sigma: f64,
    pub sigma_over_theta_nt: f64,
    /// Peak centres, equally spaced by `2 pi / n_t`.
    pub centers: Vec<f64>,
    pub amplitude: f64,
    pub offset: f64,
    /// RMS residual of the fit, in the units of the input density.
    pub goodness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SpreadOutcome {
    Fitted(SpreadFit),
    /// Modulation amplitude at or below the threshold; no width is reported.
    Suppressed { c: f64 },
}

impl SpreadOutcome {
    pub fn fit(&self) -> Option<&SpreadFit> {
        match self {
            Self::Fitted(f) => Some(f),
            Self::Suppressed { .. } => None,
        }
    }
}

fn wrapped_gaussian(d: f64, sigma: f64) -> f64 {
    let d = wrap_pi(d);
    (-2..=2).map(|m| (-0.5 * ((d + TAU * m as f64) / sigma).powi(2)).exp()).sum()
}

fn comb_model(theta: f64, n_t: usize, phase: f64, sigma: f64) -> f64 {
    let spacing = TAU / n_t as f64;
    (0..n_t).map(|k| wrapped_gaussian(theta - phase - spacing * k as f64, sigma)).sum()
}

/// Fits `n_t` equally spaced gaussians of shared width and height plus a
/// constant offset; the comb's global phase is free.
pub fn fit_angular_spread(n: &AngularDensity, n_t: usize, c_threshold: f64) -> Result<SpreadOutcome> {
    let corr = correlate(n, n_t)?;
    if corr.c <= c_threshold {
        return Ok(SpreadOutcome::Suppressed { c: corr.c });
    }
    let bins = n.bins();
    let spacing = TAU / n_t as f64;
    let scale = n.values.iter().cloned().fold(0.0, f64::max);
    let data: Vec<f64> = n.values.iter().map(|v| v / scale).collect();
    let angles: Vec<f64> = (0..bins).map(|k| bin_angle(k, bins)).collect();

    let (re, im) = fourier_component(&data, n_t);
    let phase0 = (-im.atan2(re) / n_t as f64).rem_euclid(spacing);
    let sigma0 = if 2 * n_t < bins / 2 {
        let (r2, i2) = fourier_component(&data, 2 * n_t);
        let ratio = r2.hypot(i2) / re.hypot(im);
        if ratio > 0.0 && ratio < 1.0 {
            (-2.0 * ratio.ln() / (3.0 * (n_t * n_t) as f64)).sqrt()
        } else {
            0.2 * spacing
        }
    } else {
        0.2 * spacing
    }
    .clamp(0.02 * spacing, 0.6 * spacing);
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(0.0, f64::max);

    // Offset enters squared: a negative floor would let wide, overlapping
    // peaks trade width for depth and decouple sigma from the peak shape.
    let residuals = |p: &[f64], out: &mut [f64]| {
        let sigma = p[3].exp();
        for (o, (&t, &y)) in out.iter_mut().zip(angles.iter().zip(&data)) {
            *o = p[0] * p[0] + p[1] * comb_model(t, n_t, p[2], sigma) - y;
        }
    };
    let init = [min.max(1e-6).sqrt(), max - min, phase0, sigma0.ln()];
    let report = levenberg_marquardt(residuals, &init, bins, 300);
    let p = &report.params;
    let sigma = p[3].exp();
    let rms = (report.cost / bins as f64).sqrt();
    if !rms.is_finite() || rms > 0.5 * (max - min) {
        return Err(Error::FitFailed(format!("multi-gaussian residual {rms:.3e} exceeds half the modulation")));
    }
    let phase = p[2].rem_euclid(spacing);
    Ok(SpreadOutcome::Fitted(SpreadFit {
        sigma,
        sigma_over_theta_nt: sigma / spacing,
        centers: (0..n_t).map(|k| phase + spacing * k as f64).collect(),
        amplitude: p[1] * scale,
        offset: p[0] * p[0] * scale,
        goodness: rms * scale,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    /// Best-fitting temperature (K).
    pub best_t: f64,
    /// Temperatures scanned (K).
    pub grid: Vec<f64>,
    /// Sum of squared errors at each grid temperature.
    pub sse_curve: Vec<f64>,
    /// False when the minimum sits on either end of the grid.
    pub interior: bool,
}

/// 1 mK to 120 mK in 1 mK steps, in kelvin.
pub fn temperature_grid() -> Vec<f64> {
    (1..=120).map(|k| k as f64 * 1e-3).collect()
}

/// Linear interpolation of a `(ratio, value)` curve sorted by ratio;
/// clamps outside the sampled range.
pub fn interpolate_curve(curve: &[(f64, f64)], x: f64) -> f64 {
    match curve {
        [] => f64::NAN,
        [only] => only.1,
        _ => {
            if x <= curve[0].0 {
                return curve[0].1;
            }
            for w in curve.windows(2) {
                if x <= w[1].0 {
                    let f = if w[1].0 > w[0].0 { (x - w[0].0) / (w[1].0 - w[0].0) } else { 0.0 };
                    return w[0].1 + f * (w[1].1 - w[0].1);
                }
            }
            curve[curve.len() - 1].1
        }
    }
}

/// Least-squares temperature: for each grid temperature, the simulator
/// returns `(ratio, C)` pairs that are compared with the measured points.
pub fn fit_temperature<F>(measured: &[(f64, f64)], grid: &[f64], mut simulator: F) -> Result<TemperatureFit>
where
    F: FnMut(f64) -> Result<Vec<(f64, f64)>>,
{
    if measured.is_empty() || grid.is_empty() {
        return Err(Error::InvalidInput("temperature fit needs measured points and a grid".into()));
    }
    let mut sse_curve = Vec::with_capacity(grid.len());
    for &t in grid {
        let mut sim = simulator(t)?;
        sim.sort_by(|a, b| a.0.total_cmp(&b.0));
        let sse: f64 = measured.iter().map(|&(r, c)| (c - interpolate_curve(&sim, r)).powi(2)).sum();
        sse_curve.push(sse);
    }
    let mut best = 0;
    for (k, v) in sse_curve.iter().enumerate() {
        if *v < sse_curve[best] {
            best = k;
        }
    }
    Ok(TemperatureFit {
        best_t: grid[best],
        grid: grid.to_vec(),
        interior: best > 0 && best + 1 < grid.len(),
        sse_curve,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cosine_density(eps: f64, n: usize) -> AngularDensity {
        AngularDensity::from_fn(THETA_BINS, |t| 1.0 + eps * (n as f64 * t).cos()).unwrap()
    }

    fn gaussian_comb(n_t: usize, sigma: f64, phase: f64, offset: f64) -> AngularDensity {
        AngularDensity::from_fn(THETA_BINS, |t| offset + comb_model(t, n_t, phase, sigma)).unwrap()
    }

    #[test]
    fn uniform_density_has_no_correlation() {
        let r = correlate(&AngularDensity::uniform(THETA_BINS), 4).unwrap();
        assert!(r.g.iter().all(|g| g.abs() < 1e-15));
        assert!(r.c < 1e-15);
    }

    #[test]
    fn cosine_density_matches_closed_form() {
        let (eps, n) = (0.5, 6usize);
        let r = correlate(&cosine_density(eps, n), n).unwrap();
        let h = eps * eps / 2.0;
        for (k, g) in r.g.iter().enumerate() {
            let dt = bin_angle(k, THETA_BINS);
            let want = h * ((n as f64 * dt).cos() - 1.0) / (1.0 + h);
            assert!((g - want).abs() < 1e-12, "k={k}");
        }
        assert!((r.c - 0.111_111_111_111).abs() < 1e-9);
    }

    #[test]
    fn g_vanishes_at_zero_and_is_symmetric() {
        let d = gaussian_comb(5, 0.2, 0.3, 0.1);
        let g = angular_correlation(&d).unwrap();
        assert_eq!(g[0], 0.0);
        for k in 1..THETA_BINS {
            assert!((g[k] - g[THETA_BINS - k]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_correlation_has_zero_amplitude() {
        assert_eq!(correlation_amplitude(&[0.0; 360], 4), 0.0);
    }

    #[test]
    fn all_zero_density_is_rejected() {
        assert!(matches!(AngularDensity::new(vec![0.0; 8]), Err(Error::EmptyDensity)));
        assert!(AngularDensity::new(vec![1.0, -0.1]).is_err());
    }

    #[test]
    fn spread_recovers_sigma() {
        let d = gaussian_comb(4, 0.1, 0.0, 0.0);
        let fit = fit_angular_spread(&d, 4, C_THRESHOLD).unwrap();
        let fit = fit.fit().unwrap();
        assert!((fit.sigma - 0.1).abs() < 0.002, "sigma {}", fit.sigma);
        assert!((fit.sigma_over_theta_nt - 0.1 / (PI / 2.0)).abs() < 0.002);
        assert!(fit.centers[0].abs() < 1e-3 || (fit.centers[0] - PI / 2.0).abs() < 1e-3);
    }

    #[test]
    fn spread_with_phase_and_offset() {
        let d = gaussian_comb(6, 0.15, 0.37, 0.05);
        let fit = fit_angular_spread(&d, 6, C_THRESHOLD).unwrap();
        let fit = fit.fit().unwrap();
        assert!((fit.sigma - 0.15).abs() < 1e-4);
        assert!((fit.centers[0] - 0.37).abs() < 1e-4);
        assert!((fit.offset - 0.05).abs() < 1e-4);
    }

    #[test]
    fn uniform_spread_is_suppressed() {
        let out = fit_angular_spread(&AngularDensity::uniform(THETA_BINS), 4, C_THRESHOLD).unwrap();
        assert!(matches!(out, SpreadOutcome::Suppressed { .. }));
    }

    fn toy_simulator(t: f64) -> Result<Vec<(f64, f64)>> {
        Ok([1.05, 1.1, 1.2, 1.3]
            .iter()
            .map(|&r: &f64| (r, (-(0.05 / (r - 1.0)) * t / 0.1).exp() * 0.1))
            .collect())
    }

    #[test]
    fn temperature_self_consistency() {
        let grid = temperature_grid();
        let measured = toy_simulator(0.100).unwrap();
        let fit = fit_temperature(&measured, &grid, toy_simulator).unwrap();
        assert_eq!(fit.best_t, 0.1);
        assert!(fit.interior);
        assert_eq!(fit.sse_curve.len(), 120);
    }

    #[test]
    fn zero_data_pins_to_hottest_grid_point() {
        let grid = temperature_grid();
        let measured: Vec<(f64, f64)> = [1.05, 1.1, 1.2, 1.3].iter().map(|&r| (r, 0.0)).collect();
        let fit = fit_temperature(&measured, &grid, toy_simulator).unwrap();
        assert_eq!(fit.best_t, 0.120);
        assert!(!fit.interior);
    }

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[0.2, 0.2]);
        assert_eq!((m, s), (0.2, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-15 && (s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn blur_preserves_mass() {
        let d = gaussian_comb(4, 0.05, 0.0, 0.0);
        let b = d.blurred(0.1);
        assert!((b.total() - d.total()).abs() < 1e-9 * d.total());
    }

    proptest! {
        #[test]
        fn correlation_is_scale_invariant(scale in 1e-6f64..1e6, eps in 0.0f64..0.9) {
            let d = cosine_density(eps, 5);
            let s = AngularDensity::new(d.values.iter().map(|v| v * scale).collect()).unwrap();
            let a = angular_correlation(&d).unwrap();
            let b = angular_correlation(&s).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn amplitude_ignores_rotation(shift in 0usize..360, sigma in 0.05f64..0.3) {
            let d = gaussian_comb(4, sigma, 0.0, 0.0);
            let g = angular_correlation(&d).unwrap();
            let mut rotated = g.clone();
            rotated.rotate_left(shift);
            let a = correlation_amplitude(&g, 4);
            let b = correlation_amplitude(&rotated, 4);
            prop_assert!((a - b).abs() < 1e-12 * a.max(1e-300));
        }

        #[test]
        fn spread_is_scale_free(scale in 1e-3f64..1e3) {
            let d = gaussian_comb(4, 0.12, 0.2, 0.0);
            let s = AngularDensity::new(d.values.iter().map(|v| v * scale).collect()).unwrap();
            let a = fit_angular_spread(&d, 4, C_THRESHOLD).unwrap().fit().unwrap().sigma;
            let b = fit_angular_spread(&s, 4, C_THRESHOLD).unwrap().fit().unwrap().sigma;
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
