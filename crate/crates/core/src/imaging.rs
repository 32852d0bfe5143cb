//! Synthetic fluorescence images and the ring-extraction pipeline:
//! background subtraction, elliptical ROI search, De La Hire resampling and
//! radial integration.
//!
//! Images are stored row-major with columns along z and rows along y. Pixel
//! `(col, row)` has its centre at coordinates `(col, row)`.

use std::io::{BufRead, BufReader, Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::analysis::{bin_angle, AngularDensity, THETA_BINS};
use crate::error::{Error, Result};
use crate::groundstate::Ellipse;

pub const DEFAULT_DELTA: f64 = 5.0;
/// Width of the radial band integrated by [`to_elliptic`] (px).
pub const DEFAULT_R_WINDOW: usize = 40;

const PSF_REACH: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityImage {
    pub width: usize,
    pub height: usize,
    /// Row-major counts, `height` rows of `width` pixels.
    pub counts: Vec<f64>,
    /// Micrometres per pixel.
    pub pixel_pitch: f64,
    /// Trap centre in pixel coordinates `(z, y)`.
    pub origin: Option<(f64, f64)>,
}

/// JSON sidecar written next to image files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetadata {
    pub width: usize,
    pub height: usize,
    pub pixel_pitch_um: f64,
    pub origin: Option<(f64, f64)>,
    /// Counts per stored PGM level.
    #[serde(default = "unit_scale")]
    pub scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl DensityImage {
    pub fn zeros(width: usize, height: usize, pixel_pitch: f64) -> Self {
        Self { width, height, counts: vec![0.0; width * height], pixel_pitch, origin: None }
    }

    pub fn filled(width: usize, height: usize, pixel_pitch: f64, value: f64) -> Self {
        Self { counts: vec![value; width * height], ..Self::zeros(width, height, pixel_pitch) }
    }

    pub fn from_counts(width: usize, height: usize, counts: Vec<f64>, pixel_pitch: f64) -> Result<Self> {
        if counts.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "{} counts do not fill a {width}x{height} image",
                counts.len()
            )));
        }
        if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidInput("image counts must be finite and non-negative".into()));
        }
        Ok(Self { width, height, counts, pixel_pitch, origin: None })
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.counts[row * self.width + col]
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Bilinear interpolation at `(z, y)` pixel coordinates; zero outside.
    pub fn sample(&self, z: f64, y: f64) -> f64 {
        let (c0, r0) = (z.floor(), y.floor());
        let (fz, fy) = (z - c0, y - r0);
        let px = |c: f64, r: f64| -> f64 {
            if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
                0.0
            } else {
                self.get(c as usize, r as usize)
            }
        };
        px(c0, r0) * (1.0 - fz) * (1.0 - fy)
            + px(c0 + 1.0, r0) * fz * (1.0 - fy)
            + px(c0, r0 + 1.0) * (1.0 - fz) * fy
            + px(c0 + 1.0, r0 + 1.0) * fz * fy
    }

    /// Replaces each pixel by a Poisson draw with that mean.
    pub fn with_poisson_noise(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts = self
            .counts
            .iter()
            .map(|&l| if l > 0.0 { Poisson::new(l).map_or(l, |p| p.sample(&mut rng)) } else { 0.0 })
            .collect();
        Self { counts, ..self.clone() }
    }

    pub fn metadata(&self, scale: f64) -> ImageMetadata {
        ImageMetadata {
            width: self.width,
            height: self.height,
            pixel_pitch_um: self.pixel_pitch,
            origin: self.origin,
            scale,
        }
    }

    /// Scale applied when storing as 16-bit levels.
    pub fn pgm_scale(&self) -> f64 {
        let max = self.counts.iter().cloned().fold(0.0, f64::max);
        (max / 65535.0).max(1.0)
    }

    /// Binary 16-bit PGM; counts are divided by [`Self::pgm_scale`] and
    /// rounded. Returns the scale used.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<f64> {
        let scale = self.pgm_scale();
        write!(out, "P5\n{} {}\n65535\n", self.width, self.height)?;
        let mut bytes = Vec::with_capacity(2 * self.counts.len());
        for c in &self.counts {
            let level = (c / scale).round().clamp(0.0, 65535.0) as u16;
            bytes.extend_from_slice(&level.to_be_bytes());
        }
        out.write_all(&bytes)?;
        Ok(scale)
    }

    pub fn read_pgm<R: Read>(input: R, meta: Option<&ImageMetadata>) -> Result<Self> {
        let mut rdr = BufReader::new(input);
        let mut tokens = Vec::new();
        let mut line = String::new();
        while tokens.len() < 4 {
            line.clear();
            if rdr.read_line(&mut line)? == 0 {
                return Err(Error::InvalidInput("truncated PGM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            tokens.extend(content.split_whitespace().map(str::to_owned));
        }
        if tokens[0] != "P5" {
            return Err(Error::InvalidInput(format!("expected binary PGM (P5), found {}", tokens[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::InvalidInput(format!("bad PGM header field {s}")));
        let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        let wide = maxval > 255;
        let mut raw = vec![0u8; width * height * if wide { 2 } else { 1 }];
        rdr.read_exact(&mut raw)?;
        let scale = meta.map_or(1.0, |m| m.scale);
        let counts = if wide {
            raw.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 * scale).collect()
        } else {
            raw.iter().map(|&b| b as f64 * scale).collect()
        };
        let mut img = Self::from_counts(width, height, counts, meta.map_or(1.0, |m| m.pixel_pitch_um))?;
        img.origin = meta.and_then(|m| m.origin);
        Ok(img)
    }

    /// One CSV row per image row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        for row in self.counts.chunks(self.width) {
            w.write_record(row.iter().map(|c| format!("{c}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, meta: Option<&ImageMetadata>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
        let mut counts = Vec::new();
        let mut width = None;
        let mut height = 0;
        for rec in rdr.records() {
            let rec = rec?;
            if *width.get_or_insert(rec.len()) != rec.len() {
                return Err(Error::InvalidInput("ragged image CSV".into()));
            }
            for field in rec.iter() {
                counts.push(
                    field.trim().parse::<f64>().map_err(|_| Error::InvalidInput(format!("bad pixel value {field}")))?,
                );
            }
            height += 1;
        }
        let mut img = Self::from_counts(width.unwrap_or(0), height, counts, meta.map_or(1.0, |m| m.pixel_pitch_um))?;
        img.origin = meta.and_then(|m| m.origin);
        Ok(img)
    }
}

/// Pixel-wise difference clamped at zero; keeps the image's metadata.
pub fn subtract_background(image: &DensityImage, background: &DensityImage) -> Result<DensityImage> {
    if (image.width, image.height) != (background.width, background.height) {
        return Err(Error::ShapeMismatch((image.width, image.height), (background.width, background.height)));
    }
    let counts = image.counts.iter().zip(&background.counts).map(|(a, b)| (a - b).max(0.0)).collect();
    Ok(DensityImage { counts, ..image.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseROI {
    pub o_z: f64,
    pub o_y: f64,
    pub r_z0: f64,
    pub r_y0: f64,
    /// Half width of the band (px).
    pub delta: f64,
}

impl EllipseROI {
    pub fn new(o_z: f64, o_y: f64, r_z0: f64, r_y0: f64, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && r_z0 > delta && r_y0 > delta) {
            return Err(Error::InvalidInput(format!(
                "ROI needs semi-axes above delta > 0, got ({r_z0}, {r_y0}) and {delta}"
            )));
        }
        Ok(Self { o_z, o_y, r_z0, r_y0, delta })
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.r_y0 / self.r_z0
    }

    pub fn in_band(&self, z: f64, y: f64) -> bool {
        let (dz, dy) = (z - self.o_z, y - self.o_y);
        let outer = (dz / (self.r_z0 + self.delta)).powi(2) + (dy / (self.r_y0 + self.delta)).powi(2);
        let inner = (dz / (self.r_z0 - self.delta)).powi(2) + (dy / (self.r_y0 - self.delta)).powi(2);
        outer < 1.0 && inner > 1.0
    }

    pub fn in_center(&self, z: f64, y: f64) -> bool {
        (z - self.o_z).hypot(y - self.o_y) < self.delta
    }

    /// Scaled De La Hire semi-axes `(R_z, R_y)`, with `R_z^2 + R_y^2 = 2`.
    pub fn de_la_hire_axes(&self) -> (f64, f64) {
        let norm = (self.r_z0.powi(2) + self.r_y0.powi(2)).sqrt();
        (2f64.sqrt() * self.r_z0 / norm, 2f64.sqrt() * self.r_y0 / norm)
    }

    /// De La Hire radius of the ROI ellipse (px).
    pub fn shell_radius(&self) -> f64 {
        ((self.r_z0.powi(2) + self.r_y0.powi(2)) / 2.0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Optics {
    /// Micrometres per pixel.
    pub pixel_pitch: f64,
    /// Gaussian PSF width (px).
    pub psf_sigma: f64,
    pub counts_per_ion: f64,
    /// Poisson noise seed; `None` renders expected counts.
    pub noise_seed: Option<u64>,
}

impl Default for Optics {
    fn default() -> Self {
        Self { pixel_pitch: 17.0 / 30.0, psf_sigma: 2.0, counts_per_ion: 1e4, noise_seed: None }
    }
}

/// One shell to render: its density over the ellipse's eccentric
/// parameter `t`, where the ellipse point is `(R_z0 cos t, R_y0 sin t)`
/// about the trap centre (micrometres).
#[derive(Debug, Clone, PartialEq)]
pub struct ShellRender {
    pub density: AngularDensity,
    pub ellipse: Ellipse,
    pub ions: usize,
}

/// Frame size and the ions rendered as fixed spots (trap-centre
/// coordinates `(y, z)` in micrometres), e.g. a central ion.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub spots: Vec<(f64, f64)>,
}

impl Frame {
    /// Square frame wide enough for the largest shell plus PSF tails.
    pub fn fitting(shells: &[ShellRender], optics: &Optics, margin_px: f64) -> Self {
        let r = shells
            .iter()
            .map(|s| (s.ellipse.o_z.abs() + s.ellipse.r_z0).max(s.ellipse.o_y.abs() + s.ellipse.r_y0))
            .fold(0.0, f64::max)
            / optics.pixel_pitch;
        let side = 2 * (r + PSF_REACH * optics.psf_sigma + margin_px).ceil() as usize + 1;
        Self { width: side, height: side, spots: Vec::new() }
    }
}

struct Splatter<'a> {
    img: &'a mut DensityImage,
    sigma: f64,
    reach: i64,
    weights: Vec<f64>,
}

impl Splatter<'_> {
    /// Adds `amount` counts as a gaussian spot whose discrete weights sum
    /// exactly to `amount`.
    fn deposit(&mut self, z: f64, y: f64, amount: f64) -> Result<()> {
        let (cz, cy) = (z.round() as i64, y.round() as i64);
        let r = self.reach;
        if cz - r < 0 || cy - r < 0 || cz + r >= self.img.width as i64 || cy + r >= self.img.height as i64 {
            return Err(Error::FrameOverflow { width: self.img.width, height: self.img.height });
        }
        if amount == 0.0 {
            return Ok(());
        }
        let side = (2 * r + 1) as usize;
        self.weights.clear();
        let mut sum = 0.0;
        for dy in -r..=r {
            for dz in -r..=r {
                let d2 = ((cz + dz) as f64 - z).powi(2) + ((cy + dy) as f64 - y).powi(2);
                let w = (-0.5 * d2 / (self.sigma * self.sigma)).exp();
                sum += w;
                self.weights.push(w);
            }
        }
        for (k, w) in self.weights.iter().enumerate() {
            let (row, col) = ((cy - r) as usize + k / side, (cz - r) as usize + k % side);
            self.img.counts[row * self.img.width + col] += amount * w / sum;
        }
        Ok(())
    }
}

/// Renders shells and fixed spots with a gaussian PSF. The expected total
/// is `counts_per_ion` times the number of ions.
pub fn render_image(shells: &[ShellRender], frame: &Frame, optics: &Optics) -> Result<DensityImage> {
    if !(optics.pixel_pitch > 0.0) || !(optics.psf_sigma > 0.0) || !(optics.counts_per_ion >= 0.0) {
        return Err(Error::InvalidInput("optics need positive pitch and PSF and non-negative counts".into()));
    }
    let mut img = DensityImage::zeros(frame.width, frame.height, optics.pixel_pitch);
    let center = ((frame.width as f64 - 1.0) / 2.0, (frame.height as f64 - 1.0) / 2.0);
    img.origin = Some(center);
    let to_px = |y: f64, z: f64| (center.0 + z / optics.pixel_pitch, center.1 + y / optics.pixel_pitch);
    let mut splat = Splatter {
        img: &mut img,
        sigma: optics.psf_sigma,
        reach: (PSF_REACH * optics.psf_sigma).ceil() as i64,
        weights: Vec::new(),
    };
    for shell in shells {
        let total = shell.density.total();
        if !(total > 0.0) {
            return Err(Error::EmptyDensity);
        }
        let e = &shell.ellipse;
        for (k, v) in shell.density.values.iter().enumerate() {
            let t = shell.density.angle(k);
            let (z, y) = to_px(e.o_y + e.r_y0 * t.sin(), e.o_z + e.r_z0 * t.cos());
            splat.deposit(z, y, optics.counts_per_ion * shell.ions as f64 * v / total)?;
        }
    }
    for &(y, z) in &frame.spots {
        let (pz, py) = to_px(y, z);
        splat.deposit(pz, py, optics.counts_per_ion)?;
    }
    Ok(match optics.noise_seed {
        Some(seed) => img.with_poisson_noise(seed),
        None => img,
    })
}

/// Sum of the `4 delta^2 n` brightest band pixels, central disk excluded.
fn roi_objective(image: &DensityImage, roi: &EllipseROI, n_ring: usize, buf: &mut Vec<f64>) -> f64 {
    buf.clear();
    let (rz, ry) = (roi.r_z0 + roi.delta, roi.r_y0 + roi.delta);
    let c0 = ((roi.o_z - rz).floor().max(0.0)) as usize;
    let c1 = ((roi.o_z + rz).ceil().max(0.0) as usize).min(image.width.saturating_sub(1));
    let r0 = ((roi.o_y - ry).floor().max(0.0)) as usize;
    let r1 = ((roi.o_y + ry).ceil().max(0.0) as usize).min(image.height.saturating_sub(1));
    for row in r0..=r1 {
        for col in c0..=c1 {
            let (z, y) = (col as f64, row as f64);
            if roi.in_band(z, y) && !roi.in_center(z, y) {
                buf.push(image.get(col, row));
            }
        }
    }
    let k = ((4.0 * roi.delta * roi.delta * n_ring as f64).round() as usize).min(buf.len());
    if k == 0 {
        return 0.0;
    }
    if k < buf.len() {
        buf.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    }
    buf[..k].iter().sum()
}

/// Maximizes the ROI objective: a coarse grid over the centre (within 10
/// px of the intensity centroid) and the semi-axes, then a coordinate
/// hill climb down to 0.5 px steps.
pub fn find_roi(image: &DensityImage, n_ring: usize, delta: f64) -> Result<EllipseROI> {
    if n_ring < 3 {
        return Err(Error::InvalidInput(format!("ring needs at least 3 ions, got {n_ring}")));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidInput("ROI half width must be positive".into()));
    }
    let total = image.total();
    if !(total > 0.0) {
        return Err(Error::NoRing { objective: 0.0, threshold: 0.0 });
    }
    let (mut mz, mut my) = (0.0, 0.0);
    for row in 0..image.height {
        for col in 0..image.width {
            let c = image.get(col, row);
            mz += c * col as f64;
            my += c * row as f64;
        }
    }
    let (cz, cy) = (mz / total, my / total);
    let (mut vz, mut vy) = (0.0, 0.0);
    for row in 0..image.height {
        for col in 0..image.width {
            let c = image.get(col, row);
            vz += c * (col as f64 - cz).powi(2);
            vy += c * (row as f64 - cy).powi(2);
        }
    }
    let min_r = delta + 1.0;
    let max_r = 0.5 * image.width.max(image.height) as f64;
    let rz_guess = (2.0 * vz / total).sqrt().clamp(min_r, max_r);
    let ry_guess = (2.0 * vy / total).sqrt().clamp(min_r, max_r);

    let mut buf = Vec::new();
    let mut eval = |p: [f64; 4]| -> f64 {
        if p[2] < min_r || p[3] < min_r {
            return f64::NEG_INFINITY;
        }
        let roi = EllipseROI { o_z: p[0], o_y: p[1], r_z0: p[2], r_y0: p[3], delta };
        roi_objective(image, &roi, n_ring, &mut buf)
    };

    // relative margin so near-ties resolve the same way at any intensity scale
    let better = |v: f64, best: f64| if best.is_finite() { v > best + 1e-12 * best.abs() } else { v > best };
    let mut best = ([cz, cy, rz_guess, ry_guess], f64::NEG_INFINITY);
    let scale_steps: Vec<f64> = (0..=6).map(|k| 0.7 + 0.1 * k as f64).collect();
    for dz in (-10..=10).step_by(2) {
        for dy in (-10..=10).step_by(2) {
            for &sz in &scale_steps {
                for &sy in &scale_steps {
                    let p = [cz + dz as f64, cy + dy as f64, rz_guess * sz, ry_guess * sy];
                    let v = eval(p);
                    if better(v, best.1) {
                        best = (p, v);
                    }
                }
            }
        }
    }
    for step in [2.0, 1.0, 0.5] {
        loop {
            let mut moved = false;
            for axis in 0..4 {
                for sign in [-1.0, 1.0] {
                    let mut p = best.0;
                    p[axis] += sign * step;
                    let v = eval(p);
                    if better(v, best.1) {
                        best = (p, v);
                        moved = true;
                    }
                }
            }
            if !moved {
                break;
            }
        }
    }
    let [o_z, o_y, r_z0, r_y0] = best.0;
    let roi = EllipseROI { o_z, o_y, r_z0, r_y0, delta };

    let k = (4.0 * delta * delta * n_ring as f64).round();
    let background: Vec<f64> = (0..image.height)
        .flat_map(|row| (0..image.width).map(move |col| (col, row)))
        .filter(|&(col, row)| {
            let (dz, dy) = (col as f64 - o_z, row as f64 - o_y);
            (dz / (r_z0 + delta)).powi(2) + (dy / (r_y0 + delta)).powi(2) >= 1.0 && !roi.in_center(col as f64, row as f64)
        })
        .map(|(col, row)| image.get(col, row))
        .collect();
    let (bg_mean, bg_std) = crate::analysis::mean_std(&background);
    let (bg_mean, bg_std) = if background.len() < 2 { (0.0, 0.0) } else { (bg_mean, bg_std) };
    let signal = best.1 - k * bg_mean;
    let threshold = 3.0 * bg_std * k;
    if !(signal > threshold) {
        return Err(Error::NoRing { objective: signal, threshold });
    }
    Ok(roi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarImage {
    /// Radial node offsets from the shell radius (px).
    pub r: Vec<f64>,
    /// `counts[theta_bin * r.len() + r_index]`.
    pub counts: Vec<f64>,
    pub theta_bins: usize,
    pub r_window: usize,
    pub roi: EllipseROI,
}

impl PolarImage {
    pub fn at(&self, theta_bin: usize, r_index: usize) -> f64 {
        self.counts[theta_bin * self.r.len() + r_index]
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Samples the image on the De La Hire grid `(z, y) = O + r (R_z cos
/// theta, R_y sin theta)` with `r` over the shell radius plus or minus
/// half the window, one node per pixel of radius. Nodes inside the
/// central disk are zeroed.
pub fn to_elliptic(image: &DensityImage, roi: &EllipseROI) -> PolarImage {
    to_elliptic_with(image, roi, THETA_BINS, DEFAULT_R_WINDOW)
}

pub fn to_elliptic_with(image: &DensityImage, roi: &EllipseROI, theta_bins: usize, r_window: usize) -> PolarImage {
    let (rz, ry) = roi.de_la_hire_axes();
    let shell = roi.shell_radius();
    let half = r_window as f64 / 2.0;
    let r: Vec<f64> = (0..=r_window).map(|k| k as f64 - half).collect();
    let mut counts = Vec::with_capacity(theta_bins * r.len());
    for k in 0..theta_bins {
        let (s, c) = bin_angle(k, theta_bins).sin_cos();
        for dr in &r {
            let radius = shell + dr;
            if radius < 0.0 {
                counts.push(0.0);
                continue;
            }
            let (z, y) = (roi.o_z + radius * rz * c, roi.o_y + radius * ry * s);
            counts.push(if roi.in_center(z, y) { 0.0 } else { image.sample(z, y) });
        }
    }
    PolarImage { r, counts, theta_bins, r_window, roi: *roi }
}

/// Sums the polar image over r; the result is not normalized.
pub fn angular_profile(polar: &PolarImage) -> Result<AngularDensity> {
    let nr = polar.r.len();
    AngularDensity::new((0..polar.theta_bins).map(|k| polar.counts[k * nr..(k + 1) * nr].iter().sum()).collect())
}

/// Background-subtracted image to angular profile in one call.
pub fn extract_profile(image: &DensityImage, n_ring: usize, delta: f64) -> Result<(EllipseROI, AngularDensity)> {
    let roi = find_roi(image, n_ring, delta)?;
    let profile = angular_profile(&to_elliptic(image, &roi))?;
    Ok((roi, profile))
}
