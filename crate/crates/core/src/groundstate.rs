//! Grid-based Monte Carlo search for minimum-energy planar configurations,
//! plus shell assignment and enclosing-ellipse fits.
//!
//! Ions live on a square lattice of `cell`-sized cells. One ion at a time is
//! chosen at random and moved to the lowest-energy cell of the `window x
//! window` neighbourhood around it. The descent stops once `10 N` picks in a
//! row fail to lower the energy and a final pass over every ion finds
//! nothing either. The whole descent is repeated from fresh random
//! placements and the best result is kept.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constants::CONSTANTS;
use crate::energy::{self, Ion, PlanarConfiguration};
use crate::error::{Error, Result};
use crate::trap::{IonSpecies, TrapModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Cell edge (m).
    pub cell: f64,
    /// Edge of the square area ions may occupy (m), centred on the trap.
    pub extent: f64,
    /// Cells per side of the candidate window (odd).
    pub window: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { cell: 25e-9, extent: 100e-6, window: 81 }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell > 0.0) || !(self.extent > 0.0) {
            return Err(Error::InvalidInput("grid cell and extent must be positive".into()));
        }
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::InvalidInput(format!("window must be odd and >= 3, got {}", self.window)));
        }
        let cells = self.extent / self.cell;
        if (cells - cells.round()).abs() > 1e-6 * cells {
            return Err(Error::InvalidInput("extent must be an integer number of cells".into()));
        }
        Ok(())
    }

    /// Largest cell index on either side of the centre.
    fn bound(&self) -> i64 {
        (self.extent / self.cell).round() as i64 / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimizerSettings {
    /// Independent descents from random placements (at least 5).
    pub restarts: usize,
    /// Budget of ion picks per descent before giving up.
    pub max_moves: usize,
}

impl Default for MinimizerSettings {
    fn default() -> Self {
        Self { restarts: 5, max_moves: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizationResult {
    pub config: PlanarConfiguration,
    /// Potential energy of `config` (J).
    pub energy: f64,
    pub restarts_used: usize,
    /// Ion picks spent by the winning descent.
    pub sweep_count: usize,
    pub seed: u64,
}

/// One ion restricted to the ray from the trap centre at `angle` (from z
/// towards y): its candidate cells are those within half a cell of the ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct RayConstraint {
    pub ion: usize,
    pub angle: f64,
}

/// Mutable lattice state for one descent.
pub(crate) struct GridState {
    cell: f64,
    bound: i64,
    half: i64,
    pos: Vec<[i64; 2]>,
    stiffness: Vec<[f64; 2]>,
    mobile: Vec<bool>,
    constraint: Option<RayConstraint>,
    energies: Vec<f64>,
    dz2: Vec<f64>,
    trap_z: Vec<f64>,
}

/// Relative energy decrease below which a move does not count as improving.
const IMPROVEMENT_TOL: f64 = 1e-12;

impl GridState {
    pub(crate) fn new(grid: &GridSpec, stiffness: Vec<[f64; 2]>, pos: Vec<[i64; 2]>) -> Self {
        let w = grid.window;
        let n = pos.len();
        Self {
            cell: grid.cell,
            bound: grid.bound(),
            half: (w / 2) as i64,
            pos,
            stiffness,
            mobile: vec![true; n],
            constraint: None,
            energies: vec![0.0; w * w],
            dz2: vec![0.0; w],
            trap_z: vec![0.0; w],
        }
    }

    pub(crate) fn freeze(&mut self, ion: usize) {
        self.mobile[ion] = false;
    }

    pub(crate) fn constrain(&mut self, constraint: RayConstraint) {
        self.constraint = Some(constraint);
    }

    /// Energy of ion `i` at cell `(cy, cz)` with every other ion fixed.
    fn local_energy(&self, i: usize, cy: i64, cz: i64) -> f64 {
        let y = cy as f64 * self.cell;
        let z = cz as f64 * self.cell;
        let k = self.stiffness[i];
        let mut e = 0.5 * (k[0] * y * y + k[1] * z * z);
        for (j, p) in self.pos.iter().enumerate() {
            if j != i {
                let dy = (cy - p[0]) as f64 * self.cell;
                let dz = (cz - p[1]) as f64 * self.cell;
                e += CONSTANTS.alpha / (dy * dy + dz * dz).sqrt();
            }
        }
        e
    }

    /// Moves ion `i` to the best cell of its window. Returns the energy
    /// change (zero or negative) and whether it counts as an improvement.
    pub(crate) fn try_move(&mut self, i: usize) -> (f64, bool) {
        let [cy, cz] = self.pos[i];
        let current = self.local_energy(i, cy, cz);
        let best = match self.constraint {
            Some(c) if c.ion == i => self.best_on_ray(i, c.angle),
            _ => self.best_in_window(i),
        };
        match best {
            Some((e, cell)) if e < current - IMPROVEMENT_TOL * current.abs() => {
                self.pos[i] = cell;
                (e - current, true)
            }
            _ => (0.0, false),
        }
    }

    fn in_bounds(&self, c: i64) -> bool {
        c.abs() <= self.bound
    }

    fn best_in_window(&mut self, i: usize) -> Option<(f64, [i64; 2])> {
        let [cy, cz] = self.pos[i];
        let h = self.half;
        let w = (2 * h + 1) as usize;
        let cell = self.cell;
        let [ky, kz] = self.stiffness[i];

        for c in 0..w {
            let z = (cz - h + c as i64) as f64 * cell;
            self.trap_z[c] = 0.5 * kz * z * z;
        }
        for r in 0..w {
            let y = (cy - h + r as i64) as f64 * cell;
            let ty = 0.5 * ky * y * y;
            let row = &mut self.energies[r * w..(r + 1) * w];
            for (e, tz) in row.iter_mut().zip(&self.trap_z) {
                *e = ty + tz;
            }
        }
        let alpha = CONSTANTS.alpha;
        for (j, p) in self.pos.iter().enumerate() {
            if j == i {
                continue;
            }
            for c in 0..w {
                let dz = (cz - h + c as i64 - p[1]) as f64 * cell;
                self.dz2[c] = dz * dz;
            }
            for r in 0..w {
                let dy = (cy - h + r as i64 - p[0]) as f64 * cell;
                let dy2 = dy * dy;
                let row = &mut self.energies[r * w..(r + 1) * w];
                for (e, dz2) in row.iter_mut().zip(&self.dz2) {
                    *e += alpha / (dy2 + dz2).sqrt();
                }
            }
        }

        let mut best: Option<(f64, [i64; 2])> = None;
        for r in 0..w {
            let ry = cy - h + r as i64;
            if !self.in_bounds(ry) {
                continue;
            }
            for c in 0..w {
                let rz = cz - h + c as i64;
                if !self.in_bounds(rz) {
                    continue;
                }
                let e = self.energies[r * w + c];
                if best.map_or(true, |(b, _)| e < b) {
                    best = Some((e, [ry, rz]));
                }
            }
        }
        best
    }

    fn best_on_ray(&self, i: usize, angle: f64) -> Option<(f64, [i64; 2])> {
        let [cy, cz] = self.pos[i];
        let h = self.half;
        let (s, c) = angle.sin_cos();
        let mut best: Option<(f64, [i64; 2])> = None;
        for ry in (cy - h)..=(cy + h) {
            for rz in (cz - h)..=(cz + h) {
                if !(self.in_bounds(ry) && self.in_bounds(rz)) || !on_ray(ry, rz, s, c) {
                    continue;
                }
                let e = self.local_energy(i, ry, rz);
                if best.map_or(true, |(b, _)| e < b) {
                    best = Some((e, [ry, rz]));
                }
            }
        }
        best
    }

    /// Runs the pick / final-pass protocol until converged. `on_move`
    /// receives the energy change of each accepted move.
    pub(crate) fn descend<R: Rng>(
        &mut self,
        rng: &mut R,
        max_moves: usize,
        restart: usize,
        mut on_move: impl FnMut(f64),
    ) -> Result<usize> {
        let movable: Vec<usize> = (0..self.pos.len()).filter(|&i| self.mobile[i]).collect();
        if movable.is_empty() {
            return Ok(0);
        }
        let patience = 10 * movable.len();
        let mut moves = 0usize;
        let not_converged = || Error::NotConverged { budget: max_moves, restart };
        loop {
            let mut streak = 0usize;
            while streak < patience {
                if moves >= max_moves {
                    return Err(not_converged());
                }
                let i = movable[rng.random_range(0..movable.len())];
                let (delta, improved) = self.try_move(i);
                moves += 1;
                if improved {
                    on_move(delta);
                    streak = 0;
                } else {
                    streak += 1;
                }
            }
            let mut any = false;
            for &i in &movable {
                if moves >= max_moves {
                    return Err(not_converged());
                }
                let (delta, improved) = self.try_move(i);
                moves += 1;
                if improved {
                    on_move(delta);
                    any = true;
                }
            }
            if !any {
                return Ok(moves);
            }
        }
    }

    pub(crate) fn to_configuration(&self, species: &[IonSpecies]) -> PlanarConfiguration {
        let ions = self
            .pos
            .iter()
            .zip(species)
            .map(|(p, s)| Ion::new(s.clone(), p[0] as f64 * self.cell, p[1] as f64 * self.cell))
            .collect();
        PlanarConfiguration { ions }
    }
}

/// Cell `(ry, rz)` lies within half a cell of the ray with direction
/// `(cos, sin)` in the `(z, y)` plane, on its forward side.
fn on_ray(ry: i64, rz: i64, sin: f64, cos: f64) -> bool {
    let (y, z) = (ry as f64, rz as f64);
    let perp = (-sin * z + cos * y).abs();
    let along = cos * z + sin * y;
    perp <= 0.5 && along >= 0.0
}

/// Nearest ray cell to the point at distance `radius` (in cells) along `angle`.
pub(crate) fn snap_to_ray(radius: f64, angle: f64) -> [i64; 2] {
    let (s, c) = angle.sin_cos();
    let (y, z) = (radius * s, radius * c);
    let (y0, z0) = (y.round() as i64, z.round() as i64);
    let mut best = [y0, z0];
    let mut best_d = f64::INFINITY;
    for dy in -2..=2 {
        for dz in -2..=2 {
            let (ry, rz) = (y0 + dy, z0 + dz);
            if on_ray(ry, rz, s, c) {
                let d = (ry as f64 - y).powi(2) + (rz as f64 - z).powi(2);
                if d < best_d {
                    best_d = d;
                    best = [ry, rz];
                }
            }
        }
    }
    best
}

pub(crate) fn stiffness_for(species: &[IonSpecies], trap: &TrapModel) -> Result<Vec<[f64; 2]>> {
    species
        .iter()
        .map(|s| {
            let w = trap.secular_frequencies(s)?;
            let m = s.mass_kg();
            Ok([m * w.y * w.y, m * w.z * w.z])
        })
        .collect()
}

fn random_placement<R: Rng>(rng: &mut R, n: usize, bound: i64) -> Vec<[i64; 2]> {
    let mut pos: Vec<[i64; 2]> = Vec::with_capacity(n);
    while pos.len() < n {
        let p = [rng.random_range(-bound..=bound), rng.random_range(-bound..=bound)];
        if !pos.contains(&p) {
            pos.push(p);
        }
    }
    pos
}

pub fn find_ground_state(
    species: &[IonSpecies],
    trap: &TrapModel,
    grid: &GridSpec,
    seed: u64,
) -> Result<MinimizationResult> {
    find_ground_state_with(species, trap, grid, seed, &MinimizerSettings::default())
}

/// Runs `settings.restarts` seeded descents (restart `k` uses seed `seed +
/// k`) and keeps the lowest energy, preferring the earliest restart on ties.
pub fn find_ground_state_with(
    species: &[IonSpecies],
    trap: &TrapModel,
    grid: &GridSpec,
    seed: u64,
    settings: &MinimizerSettings,
) -> Result<MinimizationResult> {
    grid.validate()?;
    let n = species.len();
    if !(1..=30).contains(&n) {
        return Err(Error::InvalidInput(format!("ion count must be in 1..=30, got {n}")));
    }
    if settings.restarts < 5 {
        return Err(Error::InvalidInput("at least 5 restarts are required".into()));
    }
    let stiffness = stiffness_for(species, trap)?;

    let mut best: Option<(f64, PlanarConfiguration, usize)> = None;
    for k in 0..settings.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let start = random_placement(&mut rng, n, grid.bound());
        let mut state = GridState::new(grid, stiffness.clone(), start);
        let moves = state.descend(&mut rng, settings.max_moves, k, |_| {})?;
        let config = state.to_configuration(species);
        let e = energy::energy_with_stiffness(&config, &stiffness);
        if best.as_ref().map_or(true, |(b, _, _)| e < *b) {
            best = Some((e, config, moves));
        }
    }
    let (energy, config, sweep_count) = best.expect("at least one restart");
    Ok(MinimizationResult { config, energy, restarts_used: settings.restarts, sweep_count, seed })
}

/// Axis-aligned ellipse in the `(y, z)` plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub o_y: f64,
    pub o_z: f64,
    pub r_y0: f64,
    pub r_z0: f64,
}

impl Ellipse {
    pub fn aspect_ratio(&self) -> f64 {
        self.r_y0 / self.r_z0
    }

    /// Normalised elliptic radius: 1 on the ellipse.
    pub fn radius_of(&self, y: f64, z: f64) -> f64 {
        (((z - self.o_z) / self.r_z0).powi(2) + ((y - self.o_y) / self.r_y0).powi(2)).sqrt()
    }
}

/// Least-squares axis-aligned ellipse through `points` (`(y, z)` pairs),
/// centred on their centroid.
pub fn fit_enclosing_ellipse(points: &[(f64, f64)]) -> Result<Ellipse> {
    let n = points.len();
    if n < 3 {
        return Err(Error::DegenerateShell { count: n });
    }
    let o_y = points.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let o_z = points.iter().map(|p| p.1).sum::<f64>() / n as f64;

    let (mut syy, mut szz, mut syz) = (0.0, 0.0, 0.0);
    for &(y, z) in points {
        syy += (y - o_y).powi(2);
        szz += (z - o_z).powi(2);
        syz += (y - o_y) * (z - o_z);
    }
    // Smallest/largest eigenvalue of the scatter matrix.
    let tr = syy + szz;
    let det = syy * szz - syz * syz;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let (lmax, lmin) = (tr / 2.0 + disc, tr / 2.0 - disc);
    if lmax <= 0.0 || lmin <= 1e-6 * lmax {
        return Err(Error::DegenerateShell { count: n });
    }

    // Solve p u + q v = 1 with u = (z - O_z)^2, v = (y - O_y)^2.
    let (mut suu, mut svv, mut suv, mut su, mut sv) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(y, z) in points {
        let u = (z - o_z).powi(2);
        let v = (y - o_y).powi(2);
        suu += u * u;
        svv += v * v;
        suv += u * v;
        su += u;
        sv += v;
    }
    let d = suu * svv - suv * suv;
    if d.abs() <= 1e-12 * suu * svv {
        return Err(Error::DegenerateShell { count: n });
    }
    let p = (su * svv - sv * suv) / d;
    let q = (sv * suu - su * suv) / d;
    if !(p > 0.0 && q > 0.0) {
        return Err(Error::DegenerateShell { count: n });
    }
    Ok(Ellipse { o_y, o_z, r_y0: 1.0 / q.sqrt(), r_z0: 1.0 / p.sqrt() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellDecomposition {
    /// Ion indices per shell, innermost first.
    pub shells: Vec<Vec<usize>>,
    /// Normalised elliptic radius of every ion.
    pub radii: Vec<f64>,
}

impl ShellDecomposition {
    pub fn outer(&self) -> &[usize] {
        self.shells.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Every ion not in the outermost shell.
    pub fn inner_ions(&self) -> Vec<usize> {
        let k = self.shells.len().saturating_sub(1);
        self.shells[..k].iter().flatten().copied().collect()
    }

    pub fn occupancy(&self) -> Vec<usize> {
        self.shells.iter().map(Vec::len).collect()
    }
}

pub const DEFAULT_SHELL_GAP: f64 = 0.5;

/// Splits ions into shells by their elliptic radius: a lone ion near the
/// centre forms its own shell, and the remaining ions are split at the
/// largest relative radius gap if it exceeds `gap_threshold`.
pub fn assign_shells(config: &PlanarConfiguration, ellipse: &Ellipse, gap_threshold: f64) -> ShellDecomposition {
    let radii: Vec<f64> = config.ions.iter().map(|i| ellipse.radius_of(i.y, i.z)).collect();
    let mut order: Vec<usize> = (0..radii.len()).collect();
    order.sort_by(|&a, &b| radii[a].total_cmp(&radii[b]).then(a.cmp(&b)));

    let split = |ions: &[usize]| -> Vec<Vec<usize>> {
        let mut best: Option<(f64, usize)> = None;
        for k in 0..ions.len().saturating_sub(1) {
            let (lo, hi) = (radii[ions[k]], radii[ions[k + 1]]);
            let gap = if lo > 0.0 { hi / lo - 1.0 } else { f64::INFINITY };
            if gap > gap_threshold && best.map_or(true, |(g, _)| gap > g) {
                best = Some((gap, k + 1));
            }
        }
        match best {
            Some((_, at)) => vec![ions[..at].to_vec(), ions[at..].to_vec()],
            None if ions.is_empty() => Vec::new(),
            None => vec![ions.to_vec()],
        }
    };

    let mut shells = Vec::new();
    if order.len() >= 3 {
        let rest = split(&order[1..]);
        let outer_mean = rest
            .last()
            .map(|s| s.iter().map(|&i| radii[i]).sum::<f64>() / s.len() as f64)
            .unwrap_or(0.0);
        let central = radii[order[0]] < 0.2 * outer_mean && radii[order[1]] >= 0.2 * outer_mean;
        if central {
            shells.push(vec![order[0]]);
            shells.extend(rest);
        } else {
            shells = split(&order);
        }
    } else if !order.is_empty() {
        shells.push(order.clone());
    }
    ShellDecomposition { shells, radii }
}

/// Shells and the outer-shell ellipse of a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellSummary {
    pub shells: ShellDecomposition,
    /// Ellipse fitted to the outermost shell; `None` for collinear crystals.
    pub outer_ellipse: Option<Ellipse>,
}

/// Assigns shells using a provisional ellipse over all ions, then fits the
/// ellipse of the outer shell.
pub fn describe_shells(config: &PlanarConfiguration) -> ShellSummary {
    let points: Vec<(f64, f64)> = config.ions.iter().map(|i| (i.y, i.z)).collect();
    let provisional = fit_enclosing_ellipse(&points).unwrap_or_else(|_| moment_ellipse(&points));
    let shells = assign_shells(config, &provisional, DEFAULT_SHELL_GAP);
    let outer: Vec<(f64, f64)> = shells.outer().iter().map(|&i| points[i]).collect();
    let outer_ellipse = fit_enclosing_ellipse(&outer).ok();
    ShellSummary { shells, outer_ellipse }
}

/// Swaps the species of ion `ion` with that of the inner-shell ion nearest
/// the trap centre, keeping every position, and recomputes the energy. A
/// no-op when `ion` is already inner or the crystal has one shell.
pub fn move_species_inward(result: &MinimizationResult, ion: usize, trap: &TrapModel) -> Result<MinimizationResult> {
    let ions = &result.config.ions;
    if ion >= ions.len() {
        return Err(Error::InvalidInput(format!("no ion {ion} in a crystal of {}", ions.len())));
    }
    let inner = describe_shells(&result.config).shells.inner_ions();
    let r2 = |i: usize| ions[i].y * ions[i].y + ions[i].z * ions[i].z;
    let Some(target) = inner.iter().copied().min_by(|&a, &b| r2(a).total_cmp(&r2(b))) else {
        return Ok(result.clone());
    };
    if inner.contains(&ion) {
        return Ok(result.clone());
    }
    let mut moved = result.clone();
    let species = moved.config.ions[ion].species.clone();
    moved.config.ions[ion].species = std::mem::replace(&mut moved.config.ions[target].species, species);
    moved.energy = energy::potential_energy(&moved.config, trap)?;
    Ok(moved)
}

fn moment_ellipse(points: &[(f64, f64)]) -> Ellipse {
    let n = points.len().max(1) as f64;
    let o_y = points.iter().map(|p| p.0).sum::<f64>() / n;
    let o_z = points.iter().map(|p| p.1).sum::<f64>() / n;
    let vy = points.iter().map(|p| (p.0 - o_y).powi(2)).sum::<f64>() / n;
    let vz = points.iter().map(|p| (p.1 - o_z).powi(2)).sum::<f64>() / n;
    let floor = 1e-12;
    Ellipse { o_y, o_z, r_y0: (2.0 * vy).sqrt().max(floor), r_z0: (2.0 * vz).sqrt().max(floor) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::khz_to_angular;
    use std::f64::consts::{PI, TAU};

    fn trap(wy_khz: f64, wz_khz: f64) -> TrapModel {
        let (wy, wz) = (khz_to_angular(wy_khz), khz_to_angular(wz_khz));
        TrapModel::from_secular(TAU * 4.7e6, [4.1 * wy.max(wz), wy, wz], -0.182, 138.0)
    }

    fn ring(n: usize, r: f64, phase: f64) -> Vec<(f64, f64)> {
        (0..n).map(|k| {
            let a = phase + TAU * k as f64 / n as f64;
            (r * a.sin(), r * a.cos())
        })
        .collect()
    }

    fn to_config(points: &[(f64, f64)]) -> PlanarConfiguration {
        PlanarConfiguration {
            ions: points.iter().map(|&(y, z)| Ion::new(IonSpecies::ba138(), y, z)).collect(),
        }
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::default().validate().is_ok());
        assert!(GridSpec { window: 80, ..Default::default() }.validate().is_err());
        assert!(GridSpec { window: 1, ..Default::default() }.validate().is_err());
        assert!(GridSpec { extent: 100.01e-6, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn single_ion_goes_to_centre() {
        let r = find_ground_state(&[IonSpecies::ba138()], &trap(100.0, 100.0), &GridSpec::default(), 3).unwrap();
        let ion = &r.config.ions[0];
        assert!(ion.y.abs() <= 25e-9 && ion.z.abs() <= 25e-9);
        assert_eq!(r.restarts_used, 5);
    }

    #[test]
    fn energy_never_increases_during_descent() {
        let grid = GridSpec::default();
        let species = vec![IonSpecies::ba138(); 5];
        let t = trap(120.0, 100.0);
        let stiffness = stiffness_for(&species, &t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let start = random_placement(&mut rng, 5, grid.bound());
        let mut state = GridState::new(&grid, stiffness.clone(), start);
        let mut e = energy::energy_with_stiffness(&state.to_configuration(&species), &stiffness);
        let mut deltas = Vec::new();
        state.descend(&mut rng, 10_000, 0, |d| deltas.push(d)).unwrap();
        assert!(!deltas.is_empty());
        for d in &deltas {
            assert!(*d < 0.0);
            e += d;
        }
        let end = energy::energy_with_stiffness(&state.to_configuration(&species), &stiffness);
        assert!((e - end).abs() < 1e-9 * end.abs());
    }

    #[test]
    fn deterministic_for_seed() {
        let species = vec![IonSpecies::ba138(); 4];
        let t = trap(110.0, 100.0);
        let a = find_ground_state(&species, &t, &GridSpec::default(), 42).unwrap();
        let b = find_ground_state(&species, &t, &GridSpec::default(), 42).unwrap();
        assert_eq!(a, b);
        let e = energy::potential_energy(&a.config, &t).unwrap();
        assert_eq!(e, a.energy);
    }

    #[test]
    fn budget_exhaustion_reports_not_converged() {
        let species = vec![IonSpecies::ba138(); 4];
        let settings = MinimizerSettings { restarts: 5, max_moves: 20 };
        let err = find_ground_state_with(&species, &trap(100.0, 100.0), &GridSpec::default(), 1, &settings).unwrap_err();
        assert!(matches!(err, Error::NotConverged { budget: 20, .. }));
    }

    #[test]
    fn ray_cells_are_within_half_cell() {
        for angle in [0.0, 0.3, PI / 4.0, 2.0, -1.1] {
            let cell = snap_to_ray(400.0, angle);
            let (s, c) = f64::sin_cos(angle);
            assert!(on_ray(cell[0], cell[1], s, c));
            let r = ((cell[0] as f64).powi(2) + (cell[1] as f64).powi(2)).sqrt();
            assert!((r - 400.0).abs() < 1.0);
        }
    }

    #[test]
    fn ellipse_of_square_is_circle() {
        let r = 10e-6;
        let e = fit_enclosing_ellipse(&[(r, 0.0), (-r, 0.0), (0.0, r), (0.0, -r)]).unwrap();
        assert!((e.r_y0 - r).abs() < 1e-12 && (e.r_z0 - r).abs() < 1e-12);
        assert!(e.o_y.abs() < 1e-18 && e.o_z.abs() < 1e-18);
    }

    #[test]
    fn ellipse_recovers_axes() {
        let pts: Vec<(f64, f64)> = (0..7)
            .map(|k| {
                let a = 0.2 + TAU * k as f64 / 7.0;
                (1.0 + 6e-6 * a.sin(), -2.0e-6 + 9e-6 * a.cos())
            })
            .collect();
        let e = fit_enclosing_ellipse(&pts).unwrap();
        assert!((e.r_y0 - 6e-6).abs() < 1e-6 * 6e-6);
        assert!((e.r_z0 - 9e-6).abs() < 1e-6 * 9e-6);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts: Vec<(f64, f64)> = (0..5).map(|k| (0.0, k as f64 * 5e-6)).collect();
        assert!(matches!(fit_enclosing_ellipse(&pts), Err(Error::DegenerateShell { count: 5 })));
        assert!(fit_enclosing_ellipse(&pts[..2]).is_err());
    }

    #[test]
    fn shells_of_synthetic_rings() {
        let mut pts = vec![(0.1e-6, 0.0)];
        pts.extend(ring(6, 15e-6, 0.1));
        let c = to_config(&pts);
        let s = describe_shells(&c);
        assert_eq!(s.shells.occupancy(), vec![1, 6]);

        let mut pts = ring(4, 7e-6, 0.3);
        pts.extend(ring(10, 18e-6, 0.0));
        let s = describe_shells(&to_config(&pts));
        assert_eq!(s.shells.occupancy(), vec![4, 10]);

        let s = describe_shells(&to_config(&ring(4, 10e-6, 0.0)));
        assert_eq!(s.shells.occupancy(), vec![4]);
        let e = s.outer_ellipse.unwrap();
        assert!((e.aspect_ratio() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn impurity_moves_to_the_centre() {
        let t = trap(120.0, 100.0);
        let mut species = vec![IonSpecies::ba138(); 7];
        species[6] = IonSpecies::ba137();
        let gs = find_ground_state(&species, &t, &GridSpec::default(), 2).unwrap();
        let moved = move_species_inward(&gs, 6, &t).unwrap();
        let inner = describe_shells(&moved.config).shells.inner_ions();
        assert_eq!(inner.len(), 1);
        assert_eq!(moved.config.ions[inner[0]].species.mass_u, 137.0);
        for (a, b) in gs.config.ions.iter().zip(&moved.config.ions) {
            assert_eq!((a.y, a.z), (b.y, b.z));
        }
        assert_eq!(moved.config.ions.iter().filter(|i| i.species.mass_u == 137.0).count(), 1);
    }
}
