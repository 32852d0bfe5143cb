//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines are always printed.

use std::f64::consts::TAU;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use meltlab::analysis::{
    angular_correlation, correlate, fit_angular_spread, fit_temperature, temperature_grid, wrap_pi, AngularDensity,
    SpreadOutcome, C_THRESHOLD, THETA_BINS,
};
use meltlab::barrier::{barrier_for, barrier_vs_n, fit_barrier_model, BarrierModel, BarrierSettings, CrystalSpec};
use meltlab::constants::khz_to_angular;
use meltlab::groundstate::{find_ground_state, Ellipse, GridSpec};
use meltlab::imaging::{
    angular_profile, find_roi, render_image, to_elliptic, Frame, Optics, ShellRender, DEFAULT_DELTA,
};
use meltlab::melting::MeltingSimulator;
use meltlab::trap::{IonSpecies, TrapCalibration, TrapModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const Q_Y: f64 = -0.182;
const T4: f64 = 0.102;
const T7: f64 = 0.096;
const RATIOS: [f64; 11] = [0.7, 0.8, 0.9, 0.95, 1.0, 1.05, 1.1, 1.15, 1.2, 1.25, 1.3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn reference_trap(ratio: f64) -> TrapModel {
    TrapCalibration::default().trap_for_ratio(ratio, Q_Y, &IonSpecies::ba138()).unwrap().1
}

fn simulator(n: usize, pin_inner: bool) -> MeltingSimulator {
    MeltingSimulator::build(
        &CrystalSpec::uniform(IonSpecies::ba138(), n, pin_inner),
        &TrapCalibration::default(),
        Q_Y,
        &RATIOS,
        11,
        &BarrierSettings::default(),
    )
}

fn four_ions() -> &'static MeltingSimulator {
    static SIM: OnceLock<MeltingSimulator> = OnceLock::new();
    SIM.get_or_init(|| simulator(4, false))
}

// Unpinned, the 7-ion outer ring slips past the centre ion during the
// rotation far from isotropy; the inner ion is held as in the impurity runs.
fn seven_ions() -> &'static MeltingSimulator {
    static SIM: OnceLock<MeltingSimulator> = OnceLock::new();
    SIM.get_or_init(|| simulator(7, true))
}

fn at(curve: &[(f64, f64)], ratio: f64) -> Option<f64> {
    curve.iter().find(|p| (p.0 - ratio).abs() < 1e-9).map(|p| p.1)
}

fn two_ion_oracle() -> Outcome {
    let start = Instant::now();
    let (e, eps0, u) = (1.602176634e-19, 8.8541878128e-12, 1.66053906660e-27);
    let omega = khz_to_angular(100.0);
    let trap = TrapModel::from_secular(TAU * 4.7e6, [omega; 3], 0.0, 138.0);
    let gs = find_ground_state(&[IonSpecies::ba138(), IonSpecies::ba138()], &trap, &GridSpec::default(), 1).unwrap();
    let (a, b) = (&gs.config.ions[0], &gs.config.ions[1]);
    let d = (a.y - b.y).hypot(a.z - b.z);
    let alpha = e * e / (4.0 * std::f64::consts::PI * eps0);
    let expected = (2.0 * alpha / (138.0 * u * omega * omega)).cbrt();
    let elapsed = start.elapsed();
    let err = (d - expected).abs();
    outcome(
        err <= 50e-9 && elapsed < Duration::from_secs(5),
        format!("d = {:.4} um, oracle {:.4} um, |err| = {:.1} nm, {:.2} s", d * 1e6, expected * 1e6, err * 1e9, elapsed.as_secs_f64()),
    )
}

fn magic_numbers() -> Outcome {
    let start = Instant::now();
    let ns: Vec<usize> = (6..=15).collect();
    let points = barrier_vs_n(&ns, &reference_trap(1.18), true, 5).unwrap();
    let vb = |n: usize| points[n - 6].v_b;
    let elapsed = start.elapsed();
    let ok = vb(7) > vb(6) && vb(7) > vb(8) && vb(14) > vb(13) && vb(14) > vb(15);
    let table: Vec<String> =
        points.iter().map(|p| format!("{}:{:.2}", p.n, meltlab::constants::joules_to_mk(p.v_b))).collect();
    outcome(ok && elapsed < Duration::from_secs(600), format!("V_B (mK) {}; {:.0} s", table.join(" "), elapsed.as_secs_f64()))
}

fn check_curve(label: &str, curve: &[(f64, f64)]) -> (bool, String) {
    let argmin = curve.iter().min_by(|a, b| a.1.total_cmp(&b.1)).map(|p| p.0);
    let c13 = at(curve, 1.3).unwrap_or(f64::NAN);
    let c07 = at(curve, 0.7).unwrap_or(f64::NAN);
    let ok = argmin.is_some_and(|r| (r - 1.0).abs() < 1e-9) && c07 >= 0.5 * c13 && c13 > 0.0;
    (ok, format!("{label}: min at {argmin:?}, C(0.7) = {c07:.4}, C(1.3) = {c13:.4}"))
}

fn non_universality() -> Outcome {
    let start = Instant::now();
    let c4 = four_ions().correlation_curve(T4).unwrap();
    let c7 = seven_ions().correlation_curve(T7).unwrap();
    let (ok4, d4) = check_curve("N=4", &c4);
    let (ok7, d7) = check_curve("N=7", &c7);
    let mut max_rel: f64 = 0.0;
    for r in RATIOS.iter().filter(|r| (1.05..=1.2).contains(*r)) {
        if let (Some(a), Some(b)) = (at(&c4, *r), at(&c7, *r)) {
            let scale = a.abs().max(b.abs());
            if scale > 0.0 {
                max_rel = max_rel.max((a - b).abs() / scale);
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        ok4 && ok7 && max_rel > 0.1 && elapsed < Duration::from_secs(600),
        format!("{d4}; {d7}; max relative gap in [1.05, 1.2] = {max_rel:.2}; {:.0} s", elapsed.as_secs_f64()),
    )
}

fn near_isotropic_shape() -> Outcome {
    let (_, curve, _) =
        barrier_for(&vec![IonSpecies::ba138(); 4], &reference_trap(1.02), false, 3, &BarrierSettings::default()).unwrap();
    let fit = fit_barrier_model(&curve, BarrierModel::Cosine).unwrap();
    let rel = fit.rms_residual / fit.v_b;
    outcome(rel < 0.05, format!("cosine-only rms / V_B = {rel:.4} (V_B = {:.3} mK)", meltlab::constants::joules_to_mk(fit.v_b)))
}

fn correlation_identities() -> Outcome {
    let start = Instant::now();
    let uniform = AngularDensity::uniform(THETA_BINS);
    let g = angular_correlation(&uniform).unwrap();
    let c_uniform = correlate(&uniform, 6).unwrap().c;
    let cosine = AngularDensity::from_fn(THETA_BINS, |t| 1.0 + 0.5 * (6.0 * t).cos()).unwrap();
    let c = correlate(&cosine, 6).unwrap().c;
    let expected = 0.125 / 1.125;
    let elapsed = start.elapsed();
    let ok = g.iter().all(|v| *v == 0.0) && c_uniform == 0.0 && (c - expected).abs() <= 1e-6 && elapsed < Duration::from_secs(1);
    outcome(ok, format!("uniform C = {c_uniform}, cosine C = {c:.8} (closed form {expected:.8}), {:.3} s", elapsed.as_secs_f64()))
}

fn temperature_roundtrip() -> Outcome {
    let sim = seven_ions();
    let clean = sim.correlation_curve(T7).unwrap();
    let grid = temperature_grid();
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut hits = 0;
    let mut found = Vec::new();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let measured: Vec<(f64, f64)> = clean.iter().map(|&(r, c)| (r, c * (1.0 + noise.sample(&mut rng)))).collect();
        let fit = fit_temperature(&measured, &grid, |t| sim.correlation_curve(t)).unwrap();
        if (fit.best_t - T7).abs() <= 0.010 + 1e-12 {
            hits += 1;
        }
        found.push(format!("{:.0}", fit.best_t * 1e3));
    }
    outcome(hits >= 18, format!("{hits}/20 within 10 mK of 96 mK; best T (mK): {}", found.join(" ")))
}

fn ring_profile(n: usize, width: f64) -> AngularDensity {
    AngularDensity::from_fn(THETA_BINS, |t| {
        (0..n).map(|k| (-0.5 * (wrap_pi(t - TAU * k as f64 / n as f64) / width).powi(2)).exp()).sum::<f64>() + 0.05
    })
    .unwrap()
}

/// Normalized RMS of the recovered profile against the input blurred by the
/// PSF's angular width on the shell.
fn imaging_case(aspect: f64) -> (f64, f64) {
    let optics = Optics::default();
    let r_um = 17.0;
    let input = ring_profile(6, 0.12);
    let ellipse = Ellipse { o_y: 0.0, o_z: 0.0, r_y0: r_um * aspect.sqrt(), r_z0: r_um / aspect.sqrt() };
    let shells = [ShellRender { density: input.clone(), ellipse, ions: 6 }];
    let image = render_image(&shells, &Frame::fitting(&shells, &optics, 10.0), &optics).unwrap();
    let roi = find_roi(&image, 6, DEFAULT_DELTA).unwrap();
    let recovered = angular_profile(&to_elliptic(&image, &roi)).unwrap().normalized();
    let expected = input.blurred(optics.psf_sigma / roi.shell_radius()).normalized();
    let (lo, hi) = expected.values.iter().fold((f64::INFINITY, 0.0f64), |(l, h), v| (l.min(*v), h.max(*v)));
    let mse = recovered.values.iter().zip(&expected.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        / expected.bins() as f64;
    (mse.sqrt() / (hi - lo), roi.aspect_ratio())
}

fn imaging_roundtrip() -> Outcome {
    let (e1, a1) = imaging_case(1.0);
    let (e2, a2) = imaging_case(1.2);
    let ok = e1 < 0.05 && e2 < 0.05 && (a1 - 1.0).abs() <= 0.05 && (a2 - 1.2).abs() <= 0.05;
    outcome(ok, format!("circular: nrms {e1:.4}, aspect {a1:.3}; aspect 1.2: nrms {e2:.4}, aspect {a2:.3}"))
}

fn run_cli(dir: &Path, args: &[&str]) -> Vec<(String, Vec<u8>)> {
    let status = Command::new(env!("CARGO_BIN_EXE_meltlab")).current_dir(dir).args(args).output().unwrap();
    assert!(status.status.success(), "{args:?}: {}", String::from_utf8_lossy(&status.stderr));
    let manifest = dir.join(args.iter().position(|a| *a == "--manifest").map_or("manifest.json", |i| args[i + 1]));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(manifest).unwrap()).unwrap();
    manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| {
            let p = p.as_str().unwrap().to_string();
            let bytes = std::fs::read(dir.join(&p)).unwrap();
            (p, bytes)
        })
        .collect()
}

fn determinism() -> Outcome {
    let commands: Vec<Vec<&str>> = vec![
        vec!["ground", "--n", "7", "--ratio", "1.25", "--seed", "42", "--out", "gs.csv", "--manifest", "m.json"],
        vec!["barrier", "--n", "4", "--ratio", "1.3", "--theta-points", "13", "--seed", "4", "--out", "b.csv", "--manifest", "m.json"],
        vec!["synth", "--n", "4", "--ratio", "1.3", "--temperature-mk", "40", "--theta-points", "13", "--seed", "9", "--out", "s.pgm", "--manifest", "m.json"],
        vec!["sweep", "--n", "4", "--ratios", "1.1,1.3", "--temperature-mk", "102", "--images", "--theta-points", "13", "--seed", "2", "--out-dir", "sw", "--manifest", "m.json"],
        vec!["calibrate", "--seed", "1", "--out", "trap.json", "--manifest", "m.json"],
        vec!["locus", "--seed", "1", "--points", "7", "--out", "locus.csv", "--manifest", "m.json"],
    ];
    let mut files = 0;
    let mut mismatched = Vec::new();
    for args in &commands {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let first = run_cli(a.path(), args);
        let second = run_cli(b.path(), args);
        files += first.len();
        if first != second {
            mismatched.push(args[0]);
        }
        // Analysis of the synthetic image, re-run on both copies.
        if args[0] == "synth" {
            let analyze = ["analyze", "--image", "s.pgm", "--nt", "4", "--seed", "3", "--out-dir", "an", "--manifest", "m2.json"];
            let x = run_cli(a.path(), &analyze);
            let y = run_cli(b.path(), &analyze);
            files += x.len();
            if x != y {
                mismatched.push("analyze");
            }
        }
    }
    outcome(mismatched.is_empty(), format!("{} commands, {files} output files compared; mismatches: {mismatched:?}", commands.len() + 1))
}

fn spread_trend() -> Outcome {
    let sim = seven_ions();
    let mut trend = Vec::new();
    let mut exact = true;
    for (i, p) in sim.points.iter().enumerate().rev() {
        if !(1.1..=1.3 + 1e-9).contains(&p.ratio) {
            continue;
        }
        let c = correlate(&sim.profile(i, T7).unwrap(), p.n_t()).unwrap().c;
        match sim.spread(i, T7).unwrap() {
            SpreadOutcome::Fitted(f) => {
                exact &= c > C_THRESHOLD;
                trend.push((p.ratio, Some(f.sigma_over_theta_nt), c));
            }
            SpreadOutcome::Suppressed { .. } => {
                exact &= c <= C_THRESHOLD;
                trend.push((p.ratio, None, c));
            }
        }
    }
    let sigmas: Vec<f64> = trend.iter().filter_map(|t| t.1).collect();
    let monotonic = sigmas.len() >= 3 && sigmas.windows(2).all(|w| w[1] > w[0]);
    // Threshold boundary on cosine densities just either side of it.
    let eps = |c: f64| (2.0 * c / (1.0 - c)).sqrt();
    for (c, suppressed) in [(C_THRESHOLD * 0.999, true), (C_THRESHOLD * 1.001, false)] {
        let n = AngularDensity::from_fn(THETA_BINS, |t| 1.0 + eps(c) * (6.0 * t).cos()).unwrap();
        let out = fit_angular_spread(&n, 6, C_THRESHOLD).unwrap();
        exact &= matches!(out, SpreadOutcome::Suppressed { .. }) == suppressed;
    }
    let listing: Vec<String> = trend
        .iter()
        .map(|(r, s, c)| match s {
            Some(s) => format!("{r:.2}:{s:.3}"),
            None => format!("{r:.2}:suppressed(C={c:.1e})"),
        })
        .collect();
    outcome(monotonic && exact, format!("sigma/theta_NT from 1.3 to 1.1: {}; threshold exact: {exact}", listing.join(" ")))
}

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "two-ion separation", two_ion_oracle),
        (2, "magic numbers", magic_numbers),
        (3, "melting non-universality", non_universality),
        (4, "near-isotropic barrier shape", near_isotropic_shape),
        (5, "correlation identities", correlation_identities),
        (6, "temperature roundtrip", temperature_roundtrip),
        (7, "imaging roundtrip", imaging_roundtrip),
        (8, "determinism", determinism),
        (9, "spread trend", spread_trend),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        if !result.pass {
            failed += 1;
        }
        println!("criterion {id} ({name}): {} | {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
