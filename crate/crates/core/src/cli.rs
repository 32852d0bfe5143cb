//! Command-line front end. Every run writes its outputs atomically and then
//! a JSON manifest listing them, the resolved configuration and the seed.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    angular_correlation, correlate, fit_angular_spread, mean_std, temperature_grid, AngularDensity, SpreadOutcome,
    C_THRESHOLD, THETA_BINS,
};
use crate::barrier::{
    barrier_for_crystal, barrier_vs_n_with, default_psf_sigma, eccentric_angle, thermal_eccentric_density, BarrierFit,
    BarrierSettings, CrystalSpec, ThermalParameters,
};
use crate::constants::{joules_to_mk, khz_to_angular};
use crate::error::{Error, Result};
use crate::groundstate::{
    describe_shells, find_ground_state_with, move_species_inward, Ellipse, GridSpec, MinimizationResult,
    MinimizerSettings,
};
use crate::imaging::{
    extract_profile, render_image, subtract_background, DensityImage, EllipseROI, Frame, ImageMetadata, Optics,
    ShellRender, DEFAULT_DELTA,
};
use crate::melting::{MeltingSimulator, SweepFailure};
use crate::trap::{fit_calibration, CalibrationAnchors, IonSpecies, TrapCalibration, TrapModel};

const DEFAULT_QY: f64 = -0.182;

#[derive(Parser, Debug, Clone, Serialize)]
#[command(name = "meltlab", version, about = "Ground states, rotation barriers and orientational melting of planar ion crystals")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize)]
pub enum Command {
    /// Minimum-energy configuration of N ions.
    Ground(GroundArgs),
    /// Constrained-rotation energy curve and barrier fit of the outer shell.
    Barrier(BarrierArgs),
    /// Melting sweep over omega_y/omega_z: C and spread per ratio.
    Sweep(SweepArgs),
    /// Synthetic fluorescence image of a thermal crystal.
    Synth(SynthArgs),
    /// Angular density, C and spread from images or density CSVs.
    Analyze(AnalyzeArgs),
    /// Fits the voltage calibration to frequency anchors.
    Calibrate(CalibrateArgs),
    /// The omega_y = omega_z line in the (q_y, a_y) plane.
    Locus(LocusArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CommonArgs {
    /// Trap calibration JSON (bundled calibration when omitted).
    #[arg(long)]
    pub trap: Option<PathBuf>,
    /// Run configuration JSON; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// RNG seed; a random seed is drawn and recorded when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Manifest path (defaults next to the outputs).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CrystalArgs {
    /// Number of ions.
    #[arg(long)]
    pub n: Option<usize>,
    /// Species of every ion, e.g. 138Ba.
    #[arg(long, default_value = "138Ba")]
    pub species: String,
    /// One ion of another species, e.g. 137Ba@inner. The @inner suffix pins
    /// the inner shell when computing barriers.
    #[arg(long)]
    pub impurity: Option<String>,
    /// omega_y/omega_z set through the DC voltage.
    #[arg(long, default_value_t = 1.18)]
    pub ratio: f64,
    /// RF Mathieu parameter q_y (config value, else -0.182).
    #[arg(long, allow_negative_numbers = true)]
    pub qy: Option<f64>,
    /// Explicit DC voltage (V); overrides --ratio.
    #[arg(long, allow_negative_numbers = true)]
    pub vdc: Option<f64>,
    /// Explicit secular frequencies x,y,z (kHz); overrides the calibration.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub secular_khz: Option<Vec<f64>>,
    /// Move budget per descent.
    #[arg(long)]
    pub max_moves: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GroundArgs {
    #[command(flatten)]
    pub crystal: CrystalArgs,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Configuration CSV; a JSON sidecar is written alongside.
    #[arg(long, default_value = "gs.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct BarrierArgs {
    #[command(flatten)]
    pub crystal: CrystalArgs,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Freeze the inner shells while the outer shell rotates.
    #[arg(long)]
    pub pin_inner: bool,
    /// Rotation angles sampled over one period.
    #[arg(long)]
    pub theta_points: Option<usize>,
    /// Tabulate V_B for these ion counts instead of one curve, e.g. 6,7,8.
    #[arg(long, value_delimiter = ',')]
    pub scan_n: Option<Vec<usize>>,
    #[arg(long, default_value = "barrier.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub crystal: CrystalArgs,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Freeze the inner shells while the outer shell rotates.
    #[arg(long)]
    pub pin_inner: bool,
    /// Comma-separated ratios (may be empty).
    #[arg(long)]
    pub ratios: Option<String>,
    /// Ratio range as lo:hi:step, inclusive of hi.
    #[arg(long)]
    pub range: Option<String>,
    /// Temperature (mK).
    #[arg(long, default_value_t = 100.0)]
    pub temperature_mk: f64,
    /// Also render, write and analyze a synthetic image per ratio.
    #[arg(long)]
    pub images: bool,
    /// Measured `ratio,C` CSV; fits the temperature against the sweep.
    #[arg(long)]
    pub measured: Option<PathBuf>,
    /// Rotation angles sampled over one period.
    #[arg(long)]
    pub theta_points: Option<usize>,
    #[arg(long, default_value = "sweep")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    pub crystal: CrystalArgs,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Freeze the inner shells while the outer shell rotates.
    #[arg(long)]
    pub pin_inner: bool,
    #[arg(long, default_value_t = 100.0)]
    pub temperature_mk: f64,
    /// Expected counts without Poisson noise.
    #[arg(long)]
    pub no_noise: bool,
    /// Rotation angles sampled over one period.
    #[arg(long)]
    pub theta_points: Option<usize>,
    /// Image path; `.pgm` or `.csv`. Metadata goes to a `.json` sidecar.
    #[arg(long, default_value = "synth.pgm")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Image files (`.pgm` or `.csv`), with optional `.json` sidecars.
    #[arg(long)]
    pub image: Vec<PathBuf>,
    /// Angular density CSVs (`theta_rad,density`).
    #[arg(long)]
    pub density: Vec<PathBuf>,
    /// Background image subtracted from every image.
    #[arg(long)]
    pub background: Option<PathBuf>,
    /// Total ions in the crystal.
    #[arg(long)]
    pub n: Option<usize>,
    /// Ions in the analysed ring (defaults to --n).
    #[arg(long)]
    pub nt: Option<usize>,
    /// Half width of the ROI band (px).
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, default_value = "analysis")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Anchor JSON (published barium operating points when omitted).
    #[arg(long)]
    pub anchors: Option<PathBuf>,
    #[arg(long, default_value = "trap.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct LocusArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value = "138Ba")]
    pub species: String,
    #[arg(long, default_value_t = -0.3, allow_negative_numbers = true)]
    pub qy_min: f64,
    #[arg(long, default_value_t = -0.1, allow_negative_numbers = true)]
    pub qy_max: f64,
    #[arg(long, default_value_t = 21)]
    pub points: usize,
    #[arg(long, default_value = "locus.csv")]
    pub out: PathBuf,
}

/// Settings read from `--config`; absent keys keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub q_y: f64,
    pub grid: GridSpec,
    pub minimizer: MinimizerSettings,
    pub theta_points: usize,
    pub optics: Optics,
    /// ROI band half width (px).
    pub delta_px: f64,
    /// Angular blur of simulated densities (rad); per-shell default when null.
    pub psf_sigma_rad: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let settings = BarrierSettings::default();
        Self {
            q_y: DEFAULT_QY,
            grid: settings.grid,
            minimizer: settings.minimizer,
            theta_points: settings.theta_points,
            optics: Optics::default(),
            delta_px: DEFAULT_DELTA,
            psf_sigma_rad: None,
        }
    }
}

impl RunConfig {
    fn barrier_settings(&self) -> BarrierSettings {
        BarrierSettings { grid: self.grid, minimizer: self.minimizer, theta_points: self.theta_points }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command_line: Vec<String>,
    /// Command line that reproduces the outputs, seed included.
    pub reproduce: Vec<String>,
    pub command: Command,
    pub config: RunConfig,
    pub calibration: TrapCalibration,
    pub seed: u64,
    pub seed_from_flag: bool,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub outputs: Vec<PathBuf>,
    pub failures: Vec<SweepFailure>,
    pub summary: serde_json::Value,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Exit 2 is reserved for unstable traps.
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &argv) {
        Ok(manifest) => {
            for path in &manifest.outputs {
                println!("wrote {}", path.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn now_s() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Collects output paths; each file is written to a temporary sibling and
/// renamed into place.
#[derive(Default)]
struct Outputs {
    files: Vec<PathBuf>,
}

impl Outputs {
    fn write<F>(&mut self, path: &Path, body: F) -> Result<()>
    where
        F: FnOnce(&mut dyn Write) -> Result<()>,
    {
        write_atomic(path, body)?;
        self.files.push(path.to_path_buf());
        Ok(())
    }

    fn json<S: Serialize>(&mut self, path: &Path, value: &S) -> Result<()> {
        self.write(path, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }

    fn table(&mut self, path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        self.write(path, |w| {
            let mut csv = csv::Writer::from_writer(w);
            csv.write_record(header)?;
            for row in rows {
                csv.write_record(row)?;
            }
            csv.flush()?;
            Ok(())
        })
    }
}

fn write_atomic<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        body(&mut w)?;
        w.flush()?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        Ok(())
    })();
    match result {
        Ok(()) => Ok(fs::rename(&tmp, path)?),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn sibling(path: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

struct Context {
    seed: u64,
    seed_from_flag: bool,
    config: RunConfig,
    calibration: TrapCalibration,
    outputs: Outputs,
    failures: Vec<SweepFailure>,
    summary: serde_json::Value,
}

impl Context {
    fn new(common: &CommonArgs) -> Result<Self> {
        let config = match &common.config {
            Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
            None => RunConfig::default(),
        };
        let calibration = match &common.trap {
            Some(path) => TrapCalibration::load(path)?,
            None => TrapCalibration::default(),
        };
        let (seed, seed_from_flag) = match common.seed {
            Some(s) => (s, true),
            None => (rand::random::<u64>(), false),
        };
        Ok(Self {
            seed,
            seed_from_flag,
            config,
            calibration,
            outputs: Outputs::default(),
            failures: Vec::new(),
            summary: serde_json::Value::Null,
        })
    }
}

fn common_of(command: &Command) -> &CommonArgs {
    match command {
        Command::Ground(a) => &a.common,
        Command::Barrier(a) => &a.common,
        Command::Sweep(a) => &a.common,
        Command::Synth(a) => &a.common,
        Command::Analyze(a) => &a.common,
        Command::Calibrate(a) => &a.common,
        Command::Locus(a) => &a.common,
    }
}

fn default_manifest(command: &Command) -> PathBuf {
    match command {
        Command::Ground(a) => sibling(&a.out, ".manifest", "json"),
        Command::Barrier(a) => sibling(&a.out, ".manifest", "json"),
        Command::Synth(a) => sibling(&a.out, ".manifest", "json"),
        Command::Calibrate(a) => sibling(&a.out, ".manifest", "json"),
        Command::Locus(a) => sibling(&a.out, ".manifest", "json"),
        Command::Sweep(a) => a.out_dir.join("manifest.json"),
        Command::Analyze(a) => a.out_dir.join("manifest.json"),
    }
}

/// Runs a parsed command and writes its manifest last.
pub fn execute(cli: &Cli, argv: &[String]) -> Result<RunManifest> {
    let started = now_s();
    let common = common_of(&cli.command);
    let mut ctx = Context::new(common)?;
    match &cli.command {
        Command::Ground(a) => cmd_ground(a, &mut ctx)?,
        Command::Barrier(a) => cmd_barrier(a, &mut ctx)?,
        Command::Sweep(a) => cmd_sweep(a, &mut ctx)?,
        Command::Synth(a) => cmd_synth(a, &mut ctx)?,
        Command::Analyze(a) => cmd_analyze(a, &mut ctx)?,
        Command::Calibrate(a) => cmd_calibrate(a, &mut ctx)?,
        Command::Locus(a) => cmd_locus(a, &mut ctx)?,
    }
    let mut reproduce = argv.to_vec();
    if !ctx.seed_from_flag {
        reproduce.push("--seed".into());
        reproduce.push(ctx.seed.to_string());
    }
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command_line: argv.to_vec(),
        reproduce,
        command: cli.command.clone(),
        config: ctx.config,
        calibration: ctx.calibration,
        seed: ctx.seed,
        seed_from_flag: ctx.seed_from_flag,
        started_unix_s: started,
        finished_unix_s: now_s(),
        outputs: ctx.outputs.files,
        failures: ctx.failures,
        summary: ctx.summary,
    };
    let path = common.manifest.clone().unwrap_or_else(|| default_manifest(&cli.command));
    write_atomic(&path, |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)?;
        writeln!(w)?;
        Ok(())
    })?;
    Ok(manifest)
}

/// `LABEL`, `LABEL@inner` or `LABEL@outer`.
fn parse_impurity(spec: &str) -> Result<(IonSpecies, bool)> {
    let (label, place) = spec.split_once('@').unwrap_or((spec, ""));
    let pin = match place {
        "" | "outer" => false,
        "inner" => true,
        other => return Err(Error::InvalidInput(format!("impurity position must be inner or outer, got {other:?}"))),
    };
    Ok((IonSpecies::parse(label)?, pin))
}

impl CrystalArgs {
    fn count(&self) -> Result<usize> {
        self.n.ok_or_else(|| Error::InvalidInput("--n is required".into()))
    }

    /// Species list; an `@inner` impurity is kept in the inner shell and
    /// pins it.
    fn crystal(&self, pin_inner: bool) -> Result<CrystalSpec> {
        let n = self.count()?;
        let mut crystal = CrystalSpec::uniform(IonSpecies::parse(&self.species)?, n, pin_inner);
        if let Some(spec) = &self.impurity {
            let (imp, inner) = parse_impurity(spec)?;
            if n < 2 {
                return Err(Error::InvalidInput("an impurity needs at least two ions".into()));
            }
            crystal.species[n - 1] = imp;
            if inner {
                crystal.pin_inner = true;
                crystal.inner_impurity = Some(n - 1);
            }
        }
        Ok(crystal)
    }

    fn q_y(&self, cfg: &RunConfig) -> f64 {
        self.qy.unwrap_or(cfg.q_y)
    }

    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = self.max_moves {
            cfg.minimizer.max_moves = m;
        }
        cfg.q_y = self.q_y(cfg);
    }

    /// Trap seen by the reference species, plus the DC voltage when the
    /// calibration was used.
    fn trap(&self, ctx: &Context) -> Result<(TrapModel, Option<f64>)> {
        let cal = &ctx.calibration;
        let q_y = self.q_y(&ctx.config);
        let reference = IonSpecies::new("ref", cal.reference_mass_u, true)?;
        if let Some(f) = &self.secular_khz {
            let omega = [khz_to_angular(f[0]), khz_to_angular(f[1]), khz_to_angular(f[2])];
            return Ok((TrapModel::from_secular(cal.omega_rf(), omega, q_y, cal.reference_mass_u), None));
        }
        if let Some(v) = self.vdc {
            let v_rf = cal.v_rf_for_qy(q_y, &reference)?;
            return Ok((cal.mathieu_for_species(v, v_rf, &reference), Some(v)));
        }
        let (v, trap) = cal.trap_for_ratio(self.ratio, q_y, &reference)?;
        Ok((trap, Some(v)))
    }
}

fn ellipse_um(e: &Ellipse) -> Ellipse {
    Ellipse { o_y: e.o_y * 1e6, o_z: e.o_z * 1e6, r_y0: e.r_y0 * 1e6, r_z0: e.r_z0 * 1e6 }
}

#[derive(Serialize)]
struct GroundReport {
    n: usize,
    seed: u64,
    #[serde(rename = "energy_J")]
    energy_j: f64,
    #[serde(rename = "energy_mK")]
    energy_mk: f64,
    shells: Vec<usize>,
    outer_ellipse_um: Option<Ellipse>,
    #[serde(rename = "secular_kHz")]
    secular_khz: [f64; 3],
    #[serde(rename = "vdc_V")]
    vdc_v: Option<f64>,
    restarts: usize,
    moves: usize,
}

fn cmd_ground(a: &GroundArgs, ctx: &mut Context) -> Result<()> {
    a.crystal.apply(&mut ctx.config);
    let crystal = a.crystal.crystal(false)?;
    let species = &crystal.species;
    let (trap, vdc) = a.crystal.trap(ctx)?;
    let secular = trap.secular_frequencies(&species[0])?;
    let mut gs = find_ground_state_with(species, &trap, &ctx.config.grid, ctx.seed, &ctx.config.minimizer)?;
    if let Some(ion) = crystal.inner_impurity {
        gs = move_species_inward(&gs, ion, &trap)?;
    }
    let shells = describe_shells(&gs.config);
    let report = GroundReport {
        n: species.len(),
        seed: ctx.seed,
        energy_j: gs.energy,
        energy_mk: joules_to_mk(gs.energy),
        shells: shells.shells.occupancy(),
        outer_ellipse_um: shells.outer_ellipse.as_ref().map(ellipse_um),
        secular_khz: secular.as_khz(),
        vdc_v: vdc,
        restarts: gs.restarts_used,
        moves: gs.sweep_count,
    };
    ctx.outputs.write(&a.out, |w| gs.config.write_csv(w))?;
    ctx.outputs.json(&sibling(&a.out, "", "json"), &report)?;
    ctx.summary = serde_json::to_value(&report)?;
    Ok(())
}

#[derive(Serialize)]
struct BarrierReport {
    eta: f64,
    phi: f64,
    /// Model coefficients (mK) of 1, cos u, cos^3 u, cos^4 u, cos^5 u.
    #[serde(rename = "coeffs_mK")]
    coeffs_mk: [f64; 5],
    #[serde(rename = "vb_mK")]
    vb_mk: f64,
    #[serde(rename = "rms_mK")]
    rms_mk: f64,
    n_t: usize,
    origin_rad: f64,
    constrained_ion: usize,
    pinned: Vec<usize>,
    shells: Vec<usize>,
}

fn fit_report(fit: &BarrierFit) -> (f64, [f64; 5], f64) {
    (joules_to_mk(fit.v_b), fit.coeffs.map(joules_to_mk), joules_to_mk(fit.rms_residual))
}

fn cmd_barrier(a: &BarrierArgs, ctx: &mut Context) -> Result<()> {
    a.crystal.apply(&mut ctx.config);
    if let Some(p) = a.theta_points {
        ctx.config.theta_points = p;
    }
    let settings = ctx.config.barrier_settings();
    let (trap, _) = a.crystal.trap(ctx)?;

    if let Some(ns) = &a.scan_n {
        let points = barrier_vs_n_with(ns, &trap, a.pin_inner, ctx.seed, &settings)?;
        let rows: Vec<Vec<String>> = points
            .iter()
            .map(|p| {
                let shells = p.occupancy.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
                vec![p.n.to_string(), p.fit.n_t.to_string(), shells, num(joules_to_mk(p.v_b))]
            })
            .collect();
        ctx.outputs.table(&a.out, &["n", "outer_ions", "shells", "vb_mK"], &rows)?;
        ctx.summary = serde_json::json!({ "points": rows.len() });
        return Ok(());
    }

    let crystal = a.crystal.crystal(a.pin_inner)?;
    let (ground, curve, fit) = barrier_for_crystal(&crystal, &trap, ctx.seed, &settings)?;
    let rows: Vec<Vec<String>> =
        curve.theta.iter().zip(&curve.energy).map(|(t, e)| vec![num(*t), num(joules_to_mk(*e))]).collect();
    let (vb_mk, coeffs_mk, rms_mk) = fit_report(&fit);
    let report = BarrierReport {
        eta: fit.eta,
        phi: fit.phi,
        coeffs_mk,
        vb_mk,
        rms_mk,
        n_t: fit.n_t,
        origin_rad: curve.origin,
        constrained_ion: curve.constrained_ion,
        pinned: curve.pinned.clone(),
        shells: describe_shells(&ground.config).shells.occupancy(),
    };
    ctx.outputs.table(&a.out, &["theta_rad", "energy_mK"], &rows)?;
    ctx.outputs.json(&sibling(&a.out, "", "json"), &report)?;
    ctx.summary = serde_json::to_value(&report)?;
    Ok(())
}

fn parse_ratios(a: &SweepArgs) -> Result<Vec<f64>> {
    let bad = |s: &str| Error::InvalidInput(format!("bad ratio {s:?}"));
    match (&a.ratios, &a.range) {
        (Some(_), Some(_)) => Err(Error::InvalidInput("give either --ratios or --range".into())),
        (Some(list), None) => list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| bad(s)))
            .collect(),
        (None, Some(range)) => {
            let parts: Vec<f64> =
                range.split(':').map(|s| s.trim().parse::<f64>().map_err(|_| bad(s))).collect::<Result<_>>()?;
            let [lo, hi, step] = parts[..] else {
                return Err(Error::InvalidInput(format!("range must be lo:hi:step, got {range:?}")));
            };
            if !(step > 0.0) {
                return Err(Error::InvalidInput("range step must be positive".into()));
            }
            let count = ((hi - lo) / step + 1e-9).floor();
            if count < 0.0 {
                return Ok(Vec::new());
            }
            // Rounded to suppress accumulated step error in file names.
            Ok((0..=count as usize).map(|k| ((lo + k as f64 * step) * 1e9).round() / 1e9).collect())
        }
        (None, None) => Err(Error::InvalidInput("give --ratios or --range".into())),
    }
}

fn thermal_for(cfg: &RunConfig, temperature_k: f64, n_t: usize) -> Result<ThermalParameters> {
    ThermalParameters::new(temperature_k, cfg.psf_sigma_rad.unwrap_or_else(|| default_psf_sigma(n_t)))
}

/// Renders the thermal outer shell and the inner ions as fixed spots.
fn render_crystal(
    ground: &MinimizationResult,
    fit: &BarrierFit,
    origin: f64,
    profile: &AngularDensity,
    optics: &Optics,
) -> Result<DensityImage> {
    let summary = describe_shells(&ground.config);
    let ellipse = summary
        .outer_ellipse
        .as_ref()
        .map(ellipse_um)
        .ok_or(Error::DegenerateShell { count: summary.shells.outer().len() })?;
    // The profile is relative to the constrained ion; put it back in place.
    let shift = eccentric_angle(origin, fit.eta);
    let placed = AngularDensity::from_fn(profile.bins(), |t| profile.interpolate(t - shift))?;
    let shells = [ShellRender { density: placed, ellipse, ions: fit.n_t }];
    let mut frame = Frame::fitting(&shells, optics, 10.0);
    frame.spots = summary
        .shells
        .inner_ions()
        .iter()
        .map(|&i| (ground.config.ions[i].y * 1e6, ground.config.ions[i].z * 1e6))
        .collect();
    render_image(&shells, &frame, optics)
}

fn write_image(outputs: &mut Outputs, path: &Path, image: &DensityImage) -> Result<()> {
    let csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let mut scale = 1.0;
    if csv {
        outputs.write(path, |w| image.write_csv(w))?;
    } else {
        outputs.write(path, |w| {
            scale = image.write_pgm(w)?;
            Ok(())
        })?;
    }
    outputs.json(&path.with_extension("json"), &image.metadata(scale))
}

fn read_image(path: &Path) -> Result<DensityImage> {
    let meta_path = path.with_extension("json");
    let meta: Option<ImageMetadata> =
        if meta_path.exists() { Some(serde_json::from_str(&fs::read_to_string(&meta_path)?)?) } else { None };
    let file = fs::File::open(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        DensityImage::read_csv(file, meta.as_ref())
    } else {
        DensityImage::read_pgm(file, meta.as_ref())
    }
}

struct ProfileStats {
    c: f64,
    sigma: Option<f64>,
    status: String,
}

fn profile_stats(profile: &AngularDensity, n_t: usize) -> Result<ProfileStats> {
    let c = correlate(profile, n_t)?.c;
    Ok(match fit_angular_spread(profile, n_t, C_THRESHOLD) {
        Ok(SpreadOutcome::Fitted(f)) => ProfileStats { c, sigma: Some(f.sigma_over_theta_nt), status: "fitted".into() },
        Ok(SpreadOutcome::Suppressed { .. }) => ProfileStats { c, sigma: None, status: "suppressed".into() },
        Err(e) => ProfileStats { c, sigma: None, status: e.to_string() },
    })
}

fn ratio_tag(ratio: f64) -> String {
    format!("r{ratio:.4}")
}

fn cmd_sweep(a: &SweepArgs, ctx: &mut Context) -> Result<()> {
    a.crystal.apply(&mut ctx.config);
    if let Some(p) = a.theta_points {
        ctx.config.theta_points = p;
    }
    if !(a.temperature_mk > 0.0) {
        return Err(Error::InvalidInput("temperature must be positive".into()));
    }
    let ratios = parse_ratios(a)?;
    let crystal = a.crystal.crystal(a.pin_inner)?;
    let species = &crystal.species;
    let settings = ctx.config.barrier_settings();
    let mut sim = MeltingSimulator::build(&crystal, &ctx.calibration, ctx.config.q_y, &ratios, ctx.seed, &settings);
    sim.psf_sigma = ctx.config.psf_sigma_rad;
    let t = a.temperature_mk * 1e-3;
    let dir = &a.out_dir;

    let mut rows = Vec::new();
    for (i, p) in sim.points.iter().enumerate() {
        let profile = sim.profile(i, t)?;
        let stats = profile_stats(&profile, p.n_t())?;
        let tag = ratio_tag(p.ratio);
        ctx.outputs.write(&dir.join(format!("profile_{tag}.csv")), |w| profile.write_csv(w))?;
        let (mut c_img, mut s_img) = (None, None);
        if a.images {
            let mut optics = ctx.config.optics;
            optics.noise_seed = Some(ctx.seed.wrapping_add(i as u64));
            let image = render_crystal(&p.ground, &p.fit, p.origin, &profile, &optics)?;
            write_image(&mut ctx.outputs, &dir.join(format!("image_{tag}.pgm")), &image)?;
            match extract_profile(&image, p.n_t(), ctx.config.delta_px) {
                Ok((_, measured)) => {
                    let s = profile_stats(&measured, p.n_t())?;
                    c_img = Some(s.c);
                    s_img = s.sigma;
                }
                Err(e) => ctx.failures.push(SweepFailure { ratio: p.ratio, exit_code: e.exit_code(), error: e.to_string() }),
            }
        }
        let secular = p.trap.secular_frequencies(&species[0])?.as_khz();
        rows.push(vec![
            num(p.ratio),
            num(p.v_dc),
            num(secular[1]),
            num(secular[2]),
            p.n_t().to_string(),
            num(joules_to_mk(p.fit.v_b)),
            num(stats.c),
            opt_num(stats.sigma),
            stats.status,
            opt_num(c_img),
            opt_num(s_img),
        ]);
    }
    ctx.outputs.table(
        &dir.join("sweep.csv"),
        &[
            "ratio",
            "vdc_V",
            "omega_y_kHz",
            "omega_z_kHz",
            "outer_ions",
            "vb_mK",
            "C",
            "sigma_over_thetant",
            "status",
            "C_image",
            "sigma_image_over_thetant",
        ],
        &rows,
    )?;
    ctx.failures.extend(sim.failures.iter().cloned());

    let mut summary = serde_json::json!({ "points": sim.points.len(), "failed": sim.failures.len() });
    if let Some(path) = &a.measured {
        let measured = read_measured(path)?;
        let fit = crate::analysis::fit_temperature(&measured, &temperature_grid(), |t| sim.correlation_curve(t))?;
        let rows: Vec<Vec<String>> =
            fit.grid.iter().zip(&fit.sse_curve).map(|(t, s)| vec![num((t * 1e3).round()), num(*s)]).collect();
        ctx.outputs.table(&dir.join("temperature_fit.csv"), &["T_mK", "sse"], &rows)?;
        summary["best_T_mK"] = serde_json::json!((fit.best_t * 1e3).round());
        summary["interior"] = serde_json::json!(fit.interior);
    }
    ctx.summary = summary;
    Ok(())
}

fn read_measured(path: &Path) -> Result<Vec<(f64, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        ratio: f64,
        #[serde(rename = "C")]
        c: f64,
    }
    let mut rdr = csv::Reader::from_reader(fs::File::open(path)?);
    rdr.deserialize::<Row>().map(|r| r.map(|r| (r.ratio, r.c)).map_err(Error::from)).collect()
}

#[derive(Serialize)]
struct SynthReport {
    #[serde(rename = "temperature_mK")]
    temperature_mk: f64,
    shells: Vec<usize>,
    #[serde(rename = "vb_mK")]
    vb_mk: f64,
    eta: f64,
    c_truth: f64,
    noise_seed: Option<u64>,
    total_counts: f64,
}

fn cmd_synth(a: &SynthArgs, ctx: &mut Context) -> Result<()> {
    a.crystal.apply(&mut ctx.config);
    if let Some(p) = a.theta_points {
        ctx.config.theta_points = p;
    }
    let crystal = a.crystal.crystal(a.pin_inner)?;
    let (trap, _) = a.crystal.trap(ctx)?;
    let settings = ctx.config.barrier_settings();
    let (ground, curve, fit) = barrier_for_crystal(&crystal, &trap, ctx.seed, &settings)?;
    let thermal = thermal_for(&ctx.config, a.temperature_mk * 1e-3, fit.n_t)?;
    let profile = thermal_eccentric_density(&fit, &thermal, THETA_BINS)?;
    let mut optics = ctx.config.optics;
    optics.noise_seed = if a.no_noise { None } else { Some(ctx.seed) };
    let image = render_crystal(&ground, &fit, curve.origin, &profile, &optics)?;
    write_image(&mut ctx.outputs, &a.out, &image)?;
    ctx.outputs.write(&sibling(&a.out, "_truth", "csv"), |w| profile.write_csv(w))?;
    let report = SynthReport {
        temperature_mk: a.temperature_mk,
        shells: describe_shells(&ground.config).shells.occupancy(),
        vb_mk: joules_to_mk(fit.v_b),
        eta: fit.eta,
        c_truth: correlate(&profile, fit.n_t)?.c,
        noise_seed: optics.noise_seed,
        total_counts: image.total(),
    };
    ctx.summary = serde_json::to_value(&report)?;
    Ok(())
}

struct AnalyzedInput {
    name: String,
    c: f64,
    sigma: Option<f64>,
    status: String,
    roi: Option<EllipseROI>,
}

fn cmd_analyze(a: &AnalyzeArgs, ctx: &mut Context) -> Result<()> {
    if let Some(d) = a.delta {
        ctx.config.delta_px = d;
    }
    let n_t = a.nt.or(a.n).ok_or_else(|| Error::InvalidInput("give --nt or --n".into()))?;
    if n_t < 2 {
        return Err(Error::InvalidInput("the ring needs at least two ions".into()));
    }
    if a.image.is_empty() && a.density.is_empty() {
        return Err(Error::InvalidInput("give at least one --image or --density".into()));
    }
    let background = a.background.as_deref().map(read_image).transpose()?;
    let mut inputs: Vec<(String, AngularDensity, Option<EllipseROI>)> = Vec::new();
    for path in &a.image {
        let mut image = read_image(path)?;
        if let Some(bg) = &background {
            image = subtract_background(&image, bg)?;
        }
        let (roi, profile) = extract_profile(&image, n_t, ctx.config.delta_px)?;
        inputs.push((path.display().to_string(), profile, Some(roi)));
    }
    for path in &a.density {
        inputs.push((path.display().to_string(), AngularDensity::read_csv(fs::File::open(path)?)?, None));
    }

    let dir = &a.out_dir;
    let mut results = Vec::new();
    for (k, (name, profile, roi)) in inputs.into_iter().enumerate() {
        let g = angular_correlation(&profile)?;
        let bins = g.len();
        let g_rows: Vec<Vec<String>> =
            g.iter().enumerate().map(|(j, v)| vec![num(crate::analysis::bin_angle(j, bins)), num(*v)]).collect();
        ctx.outputs.table(&dir.join(format!("g_{k:03}.csv")), &["dtheta_rad", "g"], &g_rows)?;
        ctx.outputs.write(&dir.join(format!("profile_{k:03}.csv")), |w| profile.write_csv(w))?;
        let s = profile_stats(&profile, n_t)?;
        results.push(AnalyzedInput { name, c: s.c, sigma: s.sigma, status: s.status, roi });
    }

    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                num(r.c),
                opt_num(r.sigma),
                r.status.clone(),
                opt_num(r.roi.map(|e| e.aspect_ratio())),
                opt_num(r.roi.map(|e| e.shell_radius())),
                opt_num(r.roi.map(|e| e.o_z)),
                opt_num(r.roi.map(|e| e.o_y)),
            ]
        })
        .collect();
    ctx.outputs.table(
        &dir.join("analysis.csv"),
        &["input", "C", "sigma_over_thetant", "status", "aspect", "shell_radius_px", "center_z_px", "center_y_px"],
        &rows,
    )?;

    let cs: Vec<f64> = results.iter().map(|r| r.c).collect();
    let sigmas: Vec<f64> = results.iter().filter_map(|r| r.sigma).collect();
    let (c_mean, c_std) = mean_std(&cs);
    let (s_mean, s_std) = mean_std(&sigmas);
    let agg = vec![
        vec!["C".into(), num(c_mean), num(c_std), cs.len().to_string()],
        vec![
            "sigma_over_thetant".into(),
            if sigmas.is_empty() { String::new() } else { num(s_mean) },
            if sigmas.is_empty() { String::new() } else { num(s_std) },
            sigmas.len().to_string(),
        ],
    ];
    ctx.outputs.table(&dir.join("summary.csv"), &["quantity", "mean", "std", "count"], &agg)?;
    ctx.summary = serde_json::json!({
        "inputs": results.len(),
        "C_mean": c_mean,
        "C_std": c_std,
        "sigma_over_thetant_mean": if sigmas.is_empty() { None } else { Some(s_mean) },
        "sigma_over_thetant_std": if sigmas.is_empty() { None } else { Some(s_std) },
    });
    Ok(())
}

fn cmd_calibrate(a: &CalibrateArgs, ctx: &mut Context) -> Result<()> {
    let anchors = match &a.anchors {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => CalibrationAnchors::published(),
    };
    let report = fit_calibration(&anchors)?;
    ctx.outputs.json(&a.out, &report.calibration)?;
    ctx.outputs.json(&sibling(&a.out, "_report", "json"), &report)?;
    ctx.summary = serde_json::json!({ "point_v_dc": report.point_v_dc });
    ctx.calibration = report.calibration;
    Ok(())
}

fn cmd_locus(a: &LocusArgs, ctx: &mut Context) -> Result<()> {
    if a.points < 2 {
        return Err(Error::InvalidInput("locus needs at least two points".into()));
    }
    let species = IonSpecies::parse(&a.species)?;
    let mut rows = Vec::new();
    for q in crate::numeric::linspace(a.qy_min, a.qy_max, a.points) {
        match ctx.calibration.symmetric_locus(&species, &[q]) {
            Ok(points) => {
                let p = points[0];
                rows.push(vec![num(p.q_y), num(p.a_y), num(p.v_dc), num(p.v_rf)]);
            }
            Err(e) => ctx.failures.push(SweepFailure { ratio: q, exit_code: e.exit_code(), error: e.to_string() }),
        }
    }
    ctx.outputs.table(&a.out, &["q_y", "a_y", "vdc_V", "vrf_Vpp"], &rows)?;
    ctx.summary = serde_json::json!({ "points": rows.len() });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn impurity_spec_parses() {
        let (sp, pin) = parse_impurity("137Ba@inner").unwrap();
        assert_eq!(sp.mass_u, 137.0);
        assert!(pin);
        assert!(!parse_impurity("137Ba").unwrap().1);
        assert!(parse_impurity("137Ba@middle").is_err());
    }

    #[test]
    fn range_includes_endpoint() {
        let cli = Cli::try_parse_from(["meltlab", "sweep", "--n", "4", "--range", "0.9:1.4:0.1"]).unwrap();
        let Command::Sweep(a) = cli.command else { panic!() };
        assert_eq!(parse_ratios(&a).unwrap(), vec![0.9, 1.0, 1.1, 1.2, 1.3, 1.4]);
    }

    #[test]
    fn empty_ratio_list_is_empty() {
        let cli = Cli::try_parse_from(["meltlab", "sweep", "--n", "4", "--ratios", ""]).unwrap();
        let Command::Sweep(a) = cli.command else { panic!() };
        assert!(parse_ratios(&a).unwrap().is_empty());
    }

    #[test]
    fn negative_qy_flag_parses() {
        let cli = Cli::try_parse_from(["meltlab", "ground", "--n", "3", "--qy", "-0.2"]).unwrap();
        let Command::Ground(a) = cli.command else { panic!() };
        assert_eq!(a.crystal.qy, Some(-0.2));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"q_y": -0.2, "bogus": 1}"#).is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"theta_points": 13}"#).unwrap();
        assert_eq!(cfg.theta_points, 13);
        assert_eq!(cfg.q_y, DEFAULT_QY);
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("x.txt");
        write_atomic(&path, |w| Ok(w.write_all(b"hello")?)).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "hello");
        assert_eq!(fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }
}
