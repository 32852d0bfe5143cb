use std::f64::consts::TAU;

use meltlab::analysis::{correlate, wrap_pi, AngularDensity, THETA_BINS};
use meltlab::barrier::{barrier_for, thermal_eccentric_density, BarrierSettings, ThermalParameters};
use meltlab::groundstate::{describe_shells, find_ground_state, Ellipse, GridSpec};
use meltlab::imaging::{
    angular_profile, extract_profile, find_roi, render_image, to_elliptic, DensityImage, Frame, Optics, ShellRender,
    DEFAULT_DELTA,
};
use meltlab::trap::{IonSpecies, TrapCalibration};
use proptest::prelude::*;

fn spots(n: usize, width: f64, phase: f64) -> AngularDensity {
    AngularDensity::from_fn(THETA_BINS, |t| {
        (0..n).map(|k| (-0.5 * (wrap_pi(t - phase - TAU * k as f64 / n as f64) / width).powi(2)).exp()).sum::<f64>()
    })
    .unwrap()
}

fn roundtrip(density: &AngularDensity, r_um: f64, aspect: f64, ions: usize) -> (f64, DensityImage) {
    let optics = Optics::default();
    let ellipse = Ellipse { o_y: 0.0, o_z: 0.0, r_y0: r_um * aspect, r_z0: r_um };
    let shells = [ShellRender { density: density.clone(), ellipse, ions }];
    let image = render_image(&shells, &Frame::fitting(&shells, &optics, 10.0), &optics).unwrap();
    let roi = find_roi(&image, ions, DEFAULT_DELTA).unwrap();
    let got = angular_profile(&to_elliptic(&image, &roi)).unwrap().normalized();
    let want = density.blurred(optics.psf_sigma / roi.shell_radius()).normalized();
    let (lo, hi) = want.values.iter().fold((f64::INFINITY, 0.0f64), |(l, h), v| (l.min(*v), h.max(*v)));
    let mse = got.values.iter().zip(&want.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / want.bins() as f64;
    (mse.sqrt() / (hi - lo), image)
}

#[test]
fn elongated_ring_roundtrip() {
    let (nrms, _) = roundtrip(&spots(5, 0.1, 0.3), 15.0, 1.3, 5);
    assert!(nrms < 0.05, "nrms {nrms}");
}

#[test]
fn band_sum_equals_profile_total() {
    let (_, image) = roundtrip(&spots(6, 0.1, 0.0), 15.0, 1.0, 6);
    let roi = find_roi(&image, 6, DEFAULT_DELTA).unwrap();
    let polar = to_elliptic(&image, &roi);
    let profile = angular_profile(&polar).unwrap();
    assert!((profile.total() - polar.total()).abs() <= 1e-9 * polar.total());
}

#[test]
fn seven_ion_ground_state_shells() {
    let cal = TrapCalibration::default();
    let species = vec![IonSpecies::ba138(); 7];
    let (_, trap) = cal.trap_for_ratio(1.25, -0.182, &species[0]).unwrap();
    let gs = find_ground_state(&species, &trap, &GridSpec::default(), 42).unwrap();
    let summary = describe_shells(&gs.config);
    assert_eq!(summary.shells.occupancy(), vec![1, 6]);
    let e = summary.outer_ellipse.unwrap();
    // The tighter y axis compresses the ring.
    assert!(e.aspect_ratio() < 1.0);
}

#[test]
fn thermal_crystal_image_recovers_correlation() {
    let cal = TrapCalibration::default();
    let species = vec![IonSpecies::ba138(); 4];
    let (_, trap) = cal.trap_for_ratio(1.3, -0.182, &species[0]).unwrap();
    let (ground, _, fit) = barrier_for(&species, &trap, false, 1, &BarrierSettings::default()).unwrap();
    let thermal = ThermalParameters::with_default_psf(0.05, fit.n_t).unwrap();
    let truth = thermal_eccentric_density(&fit, &thermal, THETA_BINS).unwrap();
    let e = describe_shells(&ground.config).outer_ellipse.unwrap();
    let ellipse = Ellipse { o_y: e.o_y * 1e6, o_z: e.o_z * 1e6, r_y0: e.r_y0 * 1e6, r_z0: e.r_z0 * 1e6 };
    let optics = Optics::default();
    let shells = [ShellRender { density: truth.clone(), ellipse, ions: 4 }];
    let image = render_image(&shells, &Frame::fitting(&shells, &optics, 10.0), &optics).unwrap();
    let (_, profile) = extract_profile(&image, 4, DEFAULT_DELTA).unwrap();
    let c_truth = correlate(&truth, 4).unwrap().c;
    let c_image = correlate(&profile, 4).unwrap().c;
    // The image blurs the ring by the PSF, which only lowers C.
    assert!(c_image <= c_truth && c_image > 0.7 * c_truth, "image {c_image} truth {c_truth}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn roundtrip_holds_for_any_ring_phase(phase in 0.0..TAU, aspect in 0.8f64..1.3) {
        let (nrms, _) = roundtrip(&spots(6, 0.12, phase), 16.0, aspect, 6);
        prop_assert!(nrms < 0.05, "nrms {}", nrms);
    }
}
