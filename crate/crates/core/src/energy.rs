//! Potential energy of a planar ion configuration: per-species harmonic
//! confinement plus pairwise Coulomb repulsion.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::constants::CONSTANTS;
use crate::error::{Error, Result};
use crate::trap::{IonSpecies, TrapModel};

/// Pairs closer than one Monte Carlo grid cell are rejected.
pub const COINCIDENCE_THRESHOLD: f64 = 25e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ion {
    pub species: IonSpecies,
    /// Position along y (m).
    pub y: f64,
    /// Position along z (m).
    pub z: f64,
}

impl Ion {
    pub fn new(species: IonSpecies, y: f64, z: f64) -> Self {
        Self { species, y, z }
    }

    /// Polar angle measured from the z axis towards y.
    pub fn angle(&self) -> f64 {
        self.y.atan2(self.z)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanarConfiguration {
    pub ions: Vec<Ion>,
}

impl PlanarConfiguration {
    pub fn new(ions: Vec<Ion>) -> Result<Self> {
        if let Some(bad) = ions.iter().position(|i| !(i.y.is_finite() && i.z.is_finite())) {
            return Err(Error::InvalidInput(format!("ion {bad} has a non-finite coordinate")));
        }
        Ok(Self { ions })
    }

    pub fn len(&self) -> usize {
        self.ions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ions.is_empty()
    }

    pub fn species(&self) -> Vec<IonSpecies> {
        self.ions.iter().map(|i| i.species.clone()).collect()
    }

    /// Rigid rotation about the trap centre by `angle` (z towards y).
    pub fn rotated(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let ions = self
            .ions
            .iter()
            .map(|i| Ion { species: i.species.clone(), z: c * i.z - s * i.y, y: s * i.z + c * i.y })
            .collect();
        Self { ions }
    }

    /// First pair closer than [`COINCIDENCE_THRESHOLD`], if any.
    pub fn check_separation(&self) -> Result<()> {
        for i in 0..self.ions.len() {
            for j in (i + 1)..self.ions.len() {
                let d = separation(&self.ions[i], &self.ions[j]);
                if d < COINCIDENCE_THRESHOLD {
                    return Err(Error::CoincidentIons { i, j, separation: d });
                }
            }
        }
        Ok(())
    }

    /// Writes the `label,mass_u,y_um,z_um` interchange format.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["label", "mass_u", "y_um", "z_um"])?;
        for ion in &self.ions {
            w.write_record([
                ion.species.label.clone(),
                format!("{}", ion.species.mass_u),
                format!("{:.6}", ion.y * 1e6),
                format!("{:.6}", ion.z * 1e6),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            label: String,
            mass_u: f64,
            y_um: f64,
            z_um: f64,
        }
        let mut rdr = csv::Reader::from_reader(input);
        let mut ions = Vec::new();
        for row in rdr.deserialize() {
            let row: Row = row?;
            let bright = IonSpecies::parse(&row.label).map(|s| s.bright).unwrap_or(true);
            let species = IonSpecies::new(row.label, row.mass_u, bright)?;
            ions.push(Ion::new(species, row.y_um * 1e-6, row.z_um * 1e-6));
        }
        Self::new(ions)
    }
}

fn separation(a: &Ion, b: &Ion) -> f64 {
    (a.y - b.y).hypot(a.z - b.z)
}

/// Spring constants `m omega_y^2`, `m omega_z^2` of each ion (N/m).
pub fn ion_stiffness(config: &PlanarConfiguration, trap: &TrapModel) -> Result<Vec<[f64; 2]>> {
    config
        .ions
        .iter()
        .map(|ion| {
            let w = trap.secular_frequencies(&ion.species)?;
            let m = ion.species.mass_kg();
            Ok([m * w.y * w.y, m * w.z * w.z])
        })
        .collect()
}

/// Total potential energy (J). Pair terms are summed in index order.
pub fn potential_energy(config: &PlanarConfiguration, trap: &TrapModel) -> Result<f64> {
    config.check_separation()?;
    let k = ion_stiffness(config, trap)?;
    Ok(energy_with_stiffness(config, &k))
}

pub(crate) fn energy_with_stiffness(config: &PlanarConfiguration, k: &[[f64; 2]]) -> f64 {
    let ions = &config.ions;
    let mut total = 0.0;
    for (i, ion) in ions.iter().enumerate() {
        total += 0.5 * (k[i][0] * ion.y * ion.y + k[i][1] * ion.z * ion.z);
        for other in &ions[i + 1..] {
            total += CONSTANTS.alpha / separation(ion, other);
        }
    }
    total
}

/// Analytic gradient `[dE/dy, dE/dz]` per ion (J/m); the force is its negative.
pub fn energy_gradient(config: &PlanarConfiguration, trap: &TrapModel) -> Result<Vec<[f64; 2]>> {
    config.check_separation()?;
    let k = ion_stiffness(config, trap)?;
    let ions = &config.ions;
    let mut grad: Vec<[f64; 2]> = ions.iter().zip(&k).map(|(ion, k)| [k[0] * ion.y, k[1] * ion.z]).collect();
    for i in 0..ions.len() {
        for j in (i + 1)..ions.len() {
            let dy = ions[i].y - ions[j].y;
            let dz = ions[i].z - ions[j].z;
            let r = dy.hypot(dz);
            let f = CONSTANTS.alpha / (r * r * r);
            grad[i][0] -= f * dy;
            grad[i][1] -= f * dz;
            grad[j][0] += f * dy;
            grad[j][1] += f * dz;
        }
    }
    Ok(grad)
}
