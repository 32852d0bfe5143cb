//! Paul-trap pseudo-potential: Mathieu parameters, secular frequencies,
//! voltage calibration and the `omega_y = omega_z` locus.
//!
//! Axes are ordered `[x, y, z]`; `x` is the tightly confined direction and the
//! crystal lives in the `y`-`z` plane. All frequencies are angular (rad/s).

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constants::CONSTANTS;
use crate::error::{Error, Result};
use crate::numeric::{bisect, levenberg_marquardt};

const AXES: [char; 3] = ['x', 'y', 'z'];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IonSpecies {
    pub label: String,
    /// Mass in atomic mass units.
    pub mass_u: f64,
    pub charge: i32,
    /// Resonant with the cooling light (shows up in fluorescence images).
    pub bright: bool,
}

impl IonSpecies {
    pub fn new(label: impl Into<String>, mass_u: f64, bright: bool) -> Result<Self> {
        if !(mass_u > 0.0) || !mass_u.is_finite() {
            return Err(Error::InvalidInput(format!("ion mass must be positive, got {mass_u}")));
        }
        Ok(Self { label: label.into(), mass_u, charge: 1, bright })
    }

    pub fn ba138() -> Self {
        Self { label: "138Ba+".into(), mass_u: 138.0, charge: 1, bright: true }
    }

    /// The lighter impurity isotope; not addressed by the cooling lasers.
    pub fn ba137() -> Self {
        Self { label: "137Ba+".into(), mass_u: 137.0, charge: 1, bright: false }
    }

    /// Parses labels of the form `138Ba`, `138Ba+` or `137Ba`. The mass is
    /// taken as the mass number; only `138` is treated as bright.
    pub fn parse(label: &str) -> Result<Self> {
        let trimmed = label.trim().trim_end_matches('+');
        let digits: String = trimmed.chars().take_while(|c| c.is_ascii_digit()).collect();
        let element = &trimmed[digits.len()..];
        if digits.is_empty() || element.is_empty() {
            return Err(Error::InvalidInput(format!("cannot parse species label {label:?}")));
        }
        let mass: f64 = digits
            .parse::<u32>()
            .map_err(|_| Error::InvalidInput(format!("bad mass number in {label:?}")))?
            .into();
        let bright = element == "Ba" && digits == "138";
        Self::new(format!("{digits}{element}+"), mass, bright)
    }

    pub fn mass_kg(&self) -> f64 {
        self.mass_u * CONSTANTS.u
    }
}

impl fmt::Display for IonSpecies {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

/// Secular (pseudo-potential) angular frequencies for one species.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecularFrequencies {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl SecularFrequencies {
    /// `omega_y / omega_z`, the in-plane anisotropy that drives melting.
    pub fn ratio(&self) -> f64 {
        self.y / self.z
    }

    pub fn as_khz(&self) -> [f64; 3] {
        [self.x, self.y, self.z].map(crate::constants::angular_to_khz)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapModel {
    /// RF drive angular frequency.
    pub omega_rf: f64,
    pub a: [f64; 3],
    pub q: [f64; 3],
    /// Mass (u) at which `a` and `q` are quoted.
    pub reference_mass_u: f64,
}

impl TrapModel {
    pub fn new(omega_rf: f64, a: [f64; 3], q_y: f64, reference_mass_u: f64) -> Self {
        Self { omega_rf, a, q: [-q_y, q_y, 0.0], reference_mass_u }
    }

    /// Builds the trap that produces the given secular frequencies for a
    /// species of mass `mass_u` at RF parameter `q_y`.
    pub fn from_secular(omega_rf: f64, omega: [f64; 3], q_y: f64, mass_u: f64) -> Self {
        let q = [-q_y, q_y, 0.0];
        let a = std::array::from_fn(|l| (2.0 * omega[l] / omega_rf).powi(2) - q[l] * q[l] / 2.0);
        Self { omega_rf, a, q, reference_mass_u: mass_u }
    }

    /// Mathieu parameters seen by `species` (`a, q` scale as `1/m`).
    pub fn mathieu_for(&self, species: &IonSpecies) -> ([f64; 3], [f64; 3]) {
        let s = self.reference_mass_u / species.mass_u;
        (self.a.map(|v| v * s), self.q.map(|v| v * s))
    }

    fn radicands(&self, species: &IonSpecies) -> [f64; 3] {
        let (a, q) = self.mathieu_for(species);
        std::array::from_fn(|l| a[l] + q[l] * q[l] / 2.0)
    }

    /// `a_l + q_l^2/2 > 0` on all three axes (strict: the boundary is unstable).
    pub fn is_stable(&self, species: &IonSpecies) -> bool {
        species.mass_u > 0.0 && self.radicands(species).iter().all(|r| *r > 0.0)
    }

    pub fn secular_frequencies(&self, species: &IonSpecies) -> Result<SecularFrequencies> {
        if !(species.mass_u > 0.0) {
            return Err(Error::InvalidInput(format!("species {species} has non-positive mass")));
        }
        let rad = self.radicands(species);
        for (l, r) in rad.iter().enumerate() {
            if !(*r > 0.0) {
                return Err(Error::UnstableTrap {
                    species: species.label.clone(),
                    axis: AXES[l],
                    radicand: *r,
                });
            }
        }
        let half = self.omega_rf / 2.0;
        Ok(SecularFrequencies { x: half * rad[0].sqrt(), y: half * rad[1].sqrt(), z: half * rad[2].sqrt() })
    }
}

/// Affine-in-voltage, inverse-in-mass map from electrode voltages to Mathieu
/// parameters. Each row is `[offset, slope per volt]` quoted at
/// `reference_mass_u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapCalibration {
    /// RF drive frequency in Hz (cyclic).
    pub omega_rf_hz: f64,
    pub reference_mass_u: f64,
    pub coeff_a: [[f64; 2]; 3],
    pub coeff_q: [[f64; 2]; 3],
    /// DC voltage interval searched when solving for a frequency ratio.
    #[serde(default = "default_span")]
    pub v_dc_span: [f64; 2],
}

fn default_span() -> [f64; 2] {
    [-60.0, 0.0]
}

const DEFAULT_CALIBRATION: &str = include_str!("../data/trap_default.json");

impl Default for TrapCalibration {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_CALIBRATION).expect("bundled calibration is valid JSON")
    }
}

impl TrapCalibration {
    pub fn from_json(text: &str) -> Result<Self> {
        let cal: Self = serde_json::from_str(text)?;
        cal.validate()?;
        Ok(cal)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .coeff_a
            .iter()
            .chain(self.coeff_q.iter())
            .flatten()
            .chain([self.omega_rf_hz, self.reference_mass_u].iter())
            .all(|v| v.is_finite());
        if !finite || self.omega_rf_hz <= 0.0 || self.reference_mass_u <= 0.0 {
            return Err(Error::InvalidInput("calibration coefficients must be finite and positive where required".into()));
        }
        if !(self.v_dc_span[0] < self.v_dc_span[1]) {
            return Err(Error::InvalidInput("v_dc_span must be increasing".into()));
        }
        Ok(())
    }

    pub fn omega_rf(&self) -> f64 {
        2.0 * PI * self.omega_rf_hz
    }

    /// Trap model for the given voltages, quoted at the species' own mass.
    pub fn mathieu_for_species(&self, v_dc: f64, v_rf: f64, species: &IonSpecies) -> TrapModel {
        let scale = self.reference_mass_u / species.mass_u;
        let a = std::array::from_fn(|l| (self.coeff_a[l][0] + self.coeff_a[l][1] * v_dc) * scale);
        let q_y = (self.coeff_q[1][0] + self.coeff_q[1][1] * v_rf) * scale;
        TrapModel::new(self.omega_rf(), a, q_y, species.mass_u)
    }

    /// RF amplitude (Vpp) giving `q_y` for `species`.
    pub fn v_rf_for_qy(&self, q_y: f64, species: &IonSpecies) -> Result<f64> {
        let [offset, slope] = self.coeff_q[1];
        if slope == 0.0 {
            return Err(Error::InvalidInput("calibration has zero q_y slope".into()));
        }
        Ok((q_y * species.mass_u / self.reference_mass_u - offset) / slope)
    }

    /// Solves for the DC voltage at which `species` sees `omega_y/omega_z =
    /// ratio` with RF set to produce `q_y`. Returns `(v_dc, trap)`.
    pub fn trap_for_ratio(&self, ratio: f64, q_y: f64, species: &IonSpecies) -> Result<(f64, TrapModel)> {
        let v_rf = self.v_rf_for_qy(q_y, species)?;
        self.solve_ratio(ratio, v_rf, species, q_y)
    }

    fn solve_ratio(&self, ratio: f64, v_rf: f64, species: &IonSpecies, q_y: f64) -> Result<(f64, TrapModel)> {
        let [lo, hi] = self.v_dc_span;
        let no_solution = || Error::NoSolution { q_y, lo, hi };
        if !(ratio > 0.0) {
            return Err(Error::InvalidInput(format!("frequency ratio must be positive, got {ratio}")));
        }
        // rad_y - ratio^2 rad_z vanishes where omega_y/omega_z = ratio.
        let residual = |v: f64| {
            let trap = self.mathieu_for_species(v, v_rf, species);
            let rad = trap.radicands(species);
            rad[1] - ratio * ratio * rad[2]
        };
        let v = bisect(residual, lo, hi, 1e-13).ok_or_else(no_solution)?;
        let trap = self.mathieu_for_species(v, v_rf, species);
        if !trap.is_stable(species) {
            return Err(no_solution());
        }
        Ok((v, trap))
    }

    /// Points `(a_y, q_y)` of the `omega_y = omega_z` line for `species`.
    pub fn symmetric_locus(&self, species: &IonSpecies, qy_values: &[f64]) -> Result<Vec<LocusPoint>> {
        qy_values
            .iter()
            .map(|&q_y| {
                let v_rf = self.v_rf_for_qy(q_y, species)?;
                let (v_dc, trap) = self.solve_ratio(1.0, v_rf, species, q_y)?;
                Ok(LocusPoint { q_y, a_y: trap.a[1], v_dc, v_rf })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocusPoint {
    pub q_y: f64,
    pub a_y: f64,
    pub v_dc: f64,
    pub v_rf: f64,
}

/// Observations used to build a [`TrapCalibration`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationAnchors {
    pub omega_rf_hz: f64,
    pub reference_mass_u: f64,
    /// `(q_y, V_RF)` pair fixing the RF slope.
    pub rf_anchor: [f64; 2],
    /// DC voltage at which the reference species sees `omega_y = omega_z`.
    pub symmetric_v_dc: f64,
    /// `omega_x / omega_y` at the symmetric point.
    pub round_x_over_y: f64,
    /// Secular frequencies (kHz, cyclic) observed at unknown DC voltages,
    /// all at the RF anchor.
    pub frequency_points_khz: Vec<[f64; 3]>,
}

impl CalibrationAnchors {
    /// The operating points reported for the barium apparatus.
    pub fn published() -> Self {
        Self {
            omega_rf_hz: 4.7e6,
            reference_mass_u: 138.0,
            rf_anchor: [-0.182, 802.0],
            symmetric_v_dc: -12.9,
            round_x_over_y: 4.1,
            frequency_points_khz: vec![[401.0, 116.0, 98.0], [400.0, 121.0, 97.0]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub calibration: TrapCalibration,
    /// Fitted DC voltage of each frequency point.
    pub point_v_dc: Vec<f64>,
    /// Relative residuals, in the order: frequency points (x, y, z each),
    /// symmetric ratio, round x/y ratio.
    pub residuals: Vec<f64>,
}

/// Least-squares fit of the DC slopes (offsets held at zero, `a ∝ V_DC`)
/// and of each frequency point's unknown voltage.
pub fn fit_calibration(anchors: &CalibrationAnchors) -> Result<CalibrationReport> {
    let [q_anchor, v_rf] = anchors.rf_anchor;
    if v_rf == 0.0 || anchors.symmetric_v_dc == 0.0 {
        return Err(Error::InvalidInput("calibration anchors need non-zero voltages".into()));
    }
    let q_slope = q_anchor / v_rf;
    let q = [-q_anchor, q_anchor, 0.0];
    let half = anchors.omega_rf_hz / 2.0 / 1e3; // kHz
    let freq = |slopes: &[f64], v: f64| -> [f64; 3] {
        std::array::from_fn(|l| half * (slopes[l] * v + q[l] * q[l] / 2.0).max(0.0).sqrt())
    };
    let points = &anchors.frequency_points_khz;
    let m = 3 * points.len() + 2;

    // Initial guess from the first point assuming it sits at the symmetric voltage.
    let v0 = anchors.symmetric_v_dc;
    let guess_point = points.first().copied().unwrap_or([400.0, 100.0, 100.0]);
    let mut init: Vec<f64> = (0..3)
        .map(|l| ((guess_point[l] / half).powi(2) - q[l] * q[l] / 2.0) / v0)
        .collect();
    init.extend(std::iter::repeat(v0).take(points.len()));

    let residuals = |p: &[f64], out: &mut [f64]| {
        let slopes = &p[..3];
        for (k, target) in points.iter().enumerate() {
            let w = freq(slopes, p[3 + k]);
            for l in 0..3 {
                out[3 * k + l] = (w[l] - target[l]) / target[l];
            }
        }
        let w0 = freq(slopes, v0);
        out[3 * points.len()] = 3.0 * (w0[1] / w0[2] - 1.0);
        out[3 * points.len() + 1] = (w0[0] / w0[1] - anchors.round_x_over_y) / anchors.round_x_over_y;
    };
    let report = levenberg_marquardt(residuals, &init, m, 500);
    let mut res = vec![0.0; m];
    residuals(&report.params, &mut res);
    if !report.cost.is_finite() {
        return Err(Error::FitFailed("calibration fit diverged".into()));
    }
    let p = &report.params;
    let calibration = TrapCalibration {
        omega_rf_hz: anchors.omega_rf_hz,
        reference_mass_u: anchors.reference_mass_u,
        coeff_a: [[0.0, p[0]], [0.0, p[1]], [0.0, p[2]]],
        coeff_q: [[0.0, -q_slope], [0.0, q_slope], [0.0, 0.0]],
        v_dc_span: default_span(),
    };
    Ok(CalibrationReport { calibration, point_v_dc: p[3..].to_vec(), residuals: res })
}
