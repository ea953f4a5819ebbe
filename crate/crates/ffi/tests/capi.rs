use std::ffi::{CStr, CString};
use std::ptr;

use ionswap_ffi::*;

fn calibrated() -> *mut IonswapGeometry {
    let mut g = ptr::null_mut();
    let s = unsafe { ionswap_geometry_calibrate(1.488, 1.927, 3.248, -6.0, &mut g) };
    assert_eq!(s, IonswapStatus::Ok);
    assert!(!g.is_null());
    g
}

#[test]
fn modes_through_the_handle() {
    let g = calibrated();
    let mut f = [0.0; 6];
    assert_eq!(unsafe { ionswap_two_ion_modes(g, -6.0, f.as_mut_ptr()) }, IonswapStatus::Ok);
    assert!((f[1] / f[0] - 3f64.sqrt()).abs() < 1e-3);
    assert!((f[2] - 1.927).abs() < 1e-6);
    unsafe { ionswap_geometry_free(g) };
}

#[test]
fn null_pointers_are_reported() {
    assert_eq!(
        unsafe { ionswap_two_ion_modes(ptr::null(), -6.0, ptr::null_mut()) },
        IonswapStatus::NullPointer
    );
    let msg = unsafe { CStr::from_ptr(ionswap_last_error()) };
    assert!(msg.to_str().unwrap().contains("null"));
    unsafe { ionswap_geometry_free(ptr::null_mut()) };
    unsafe { ionswap_string_free(ptr::null_mut()) };
}

#[test]
fn bad_calibration_targets_map_to_status() {
    let mut g = ptr::null_mut();
    let s = unsafe { ionswap_geometry_calibrate(1.488, 1.927, 1.927, -6.0, &mut g) };
    assert_ne!(s, IonswapStatus::Ok);
    assert!(g.is_null());
    assert!(!ionswap_last_error().is_null());
}

#[test]
fn swap_excitation_is_small() {
    let g = calibrated();
    let (mut n, mut swapped) = (f64::NAN, false);
    assert_eq!(unsafe { ionswap_swap_excitation(g, 22.0, 1.4, &mut n, &mut swapped) }, IonswapStatus::Ok);
    assert!(swapped && n < 0.5);
    assert_eq!(
        unsafe { ionswap_swap_excitation(g, -1.0, 1.4, &mut n, &mut swapped) },
        IonswapStatus::Config
    );
    unsafe { ionswap_geometry_free(g) };
}

#[test]
fn rabi_probability_matches_ground_state_sinusoid() {
    let mut p = 0.0;
    let s = unsafe { ionswap_rabi_probability(true, 0.0, 2, 0.1, 3.0, 2.0, &mut p) };
    assert_eq!(s, IonswapStatus::Ok);
    assert!((p - (0.1f64 * 3.0 * 2.0 / 2.0).sin().powi(2)).abs() < 1e-14);
    assert_eq!(unsafe { ionswap_rabi_probability(true, 0.0, 7, 0.1, 3.0, 2.0, &mut p) }, IonswapStatus::Config);
}

#[test]
fn run_returns_json_and_status() {
    let cfg = CString::new("[reorder]\nshots = 20\n").unwrap();
    let cmd = CString::new("reorder").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ionswap_run(cfg.as_ptr(), cmd.as_ptr(), 5, true, &mut out) }, IonswapStatus::Ok);
    let json = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_string();
    unsafe { ionswap_string_free(out) };
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["seed"], 5);
    assert_eq!(v["result"]["fidelity_raw"], 1.0);

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ionswap_run(cfg.as_ptr(), cmd.as_ptr(), 0, false, &mut out) }, IonswapStatus::Config);
    let bad = CString::new("[nope]\n").unwrap();
    assert_eq!(unsafe { ionswap_run(bad.as_ptr(), cmd.as_ptr(), 0, true, &mut out) }, IonswapStatus::Config);
    assert!(out.is_null());
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/ionswap.h");
    let Ok(status) = std::process::Command::new("cc").args(["-fsyntax-only", "-x", "c", header]).status() else {
        eprintln!("no C compiler, skipping");
        return;
    };
    assert!(status.success());
}
