//! C ABI over `ionswap`.
//!
//! Every function returns an [`IonswapStatus`]; results go through out
//! pointers. Handles are opaque and must be released with their `_free`
//! function. Strings returned by the library are freed with
//! [`ionswap_string_free`]. Panics never cross the boundary; they surface as
//! `IONSWAP_STATUS_PANIC`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ionswap::app::{execute, mode_table, Command};
use ionswap::config::RunConfig;
use ionswap::dynamics::{simulate_swap, IntegrateOptions};
use ionswap::filter::FilterModel;
use ionswap::thermometry::{rabi_model, Observable, RabiParams, StateModel, Transition};
use ionswap::trap::{calibrate, SecularTargets, TrapGeometry, TrapLayout};
use ionswap::waveform::SwapRampParams;
use ionswap::Error;

/// Result of every call. The positive codes match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IonswapStatus {
    Ok = 0,
    /// Invalid configuration or arguments.
    Config = 2,
    /// Ion escape, unstable potential or other physics failure.
    Physics = 3,
    /// Fit or optimizer did not converge.
    Fit = 4,
    NullPointer = -1,
    InvalidUtf8 = -2,
    Panic = -3,
}

/// Calibrated trap geometry.
pub struct IonswapGeometry {
    inner: TrapGeometry,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn from_error(e: &Error) -> IonswapStatus {
    set_error(&e.to_string());
    match e.exit_code() {
        3 => IonswapStatus::Physics,
        4 => IonswapStatus::Fit,
        _ => IonswapStatus::Config,
    }
}

fn guard<F: FnOnce() -> IonswapStatus>(f: F) -> IonswapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("panic: {msg}"));
            IonswapStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, IonswapStatus> {
    if p.is_null() {
        set_error("null string argument");
        return Err(IonswapStatus::NullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        IonswapStatus::InvalidUtf8
    })
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ionswap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Calibrates the surrogate trap to single-ion secular frequencies (MHz) at
/// trap voltage `u_c` (V).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ionswap_geometry_calibrate(
    axial_mhz: f64,
    radial_low_mhz: f64,
    radial_high_mhz: f64,
    u_c: f64,
    out: *mut *mut IonswapGeometry,
) -> IonswapStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return IonswapStatus::NullPointer;
        }
        let targets = SecularTargets {
            axial_mhz,
            radial_low_mhz,
            radial_high_mhz,
        };
        match calibrate(&TrapLayout::default(), &targets, u_c) {
            Ok(g) => {
                *out = Box::into_raw(Box::new(IonswapGeometry { inner: g }));
                IonswapStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Releases a geometry. NULL is ignored.
///
/// # Safety
/// `geometry` must come from [`ionswap_geometry_calibrate`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ionswap_geometry_free(geometry: *mut IonswapGeometry) {
    if !geometry.is_null() {
        drop(Box::from_raw(geometry));
    }
}

/// Six two-ion mode frequencies (MHz) in the hold well at `u_c`, in the order
/// axial COM, axial stretch, low radial COM, low rocking, high radial COM,
/// high rocking.
///
/// # Safety
/// `geometry` must be valid and `out` must point to 6 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ionswap_two_ion_modes(
    geometry: *const IonswapGeometry,
    u_c: f64,
    out: *mut f64,
) -> IonswapStatus {
    guard(|| {
        if geometry.is_null() || out.is_null() {
            set_error("null pointer");
            return IonswapStatus::NullPointer;
        }
        match mode_table(&(*geometry).inner, u_c) {
            Ok(rows) => {
                for (k, r) in rows.iter().enumerate() {
                    *out.add(k) = r.frequency_mhz;
                }
                IonswapStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Simulates one swap of programmed `duration` (µs) with diagonal peak
/// `u_d_peak` (V) under the default filter, and reports the largest mean
/// phonon number and whether the ions exchanged.
///
/// # Safety
/// `geometry` must be valid; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn ionswap_swap_excitation(
    geometry: *const IonswapGeometry,
    duration: f64,
    u_d_peak: f64,
    max_n_bar: *mut f64,
    swapped: *mut bool,
) -> IonswapStatus {
    guard(|| {
        if geometry.is_null() || max_n_bar.is_null() || swapped.is_null() {
            set_error("null pointer");
            return IonswapStatus::NullPointer;
        }
        let params = SwapRampParams {
            duration,
            u_d_peak,
            ..Default::default()
        };
        if let Err(e) = params.validate() {
            return from_error(&e);
        }
        match simulate_swap(&(*geometry).inner, &params, &FilterModel::default(), &IntegrateOptions::default()) {
            Ok(s) => {
                *max_n_bar = s.excitation.max_n_bar();
                *swapped = s.swapped;
                IonswapStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Flip probability of a sideband or carrier pulse of length `t` (µs).
/// `thermal` selects geometric over Poissonian populations; `transition` is
/// 0 carrier, 1 red, 2 blue sideband.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ionswap_rabi_probability(
    thermal: bool,
    n_bar: f64,
    transition: i32,
    eta: f64,
    omega0: f64,
    t: f64,
    out: *mut f64,
) -> IonswapStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return IonswapStatus::NullPointer;
        }
        let transition = match transition {
            0 => Transition::Carrier,
            1 => Transition::Rsb,
            2 => Transition::Bsb,
            other => {
                set_error(&format!("unknown transition {other}"));
                return IonswapStatus::Config;
            }
        };
        if !(eta > 0.0 && eta < ionswap::thermometry::MAX_ETA) || !(n_bar >= 0.0) || !(t >= 0.0) {
            set_error("need 0 < eta < 0.3, n_bar >= 0 and t >= 0");
            return IonswapStatus::Config;
        }
        let model = if thermal { StateModel::Thermal } else { StateModel::Coherent };
        let params = RabiParams { eta, omega0, decay: 0.0 };
        *out = rabi_model(model, n_bar, transition, &params, Observable::SingleIon, t);
        IonswapStatus::Ok
    })
}

/// Runs a command-line subcommand (`"modes"`, `"reorder"`, ...) on a TOML
/// configuration and returns its JSON output. `seed` is used when
/// `has_seed` is true.
///
/// # Safety
/// `config_toml` and `command` must be NUL-terminated; `out_json` must be
/// writable. The returned string is freed with [`ionswap_string_free`].
#[no_mangle]
pub unsafe extern "C" fn ionswap_run(
    config_toml: *const c_char,
    command: *const c_char,
    seed: u64,
    has_seed: bool,
    out_json: *mut *mut c_char,
) -> IonswapStatus {
    guard(|| {
        if out_json.is_null() {
            set_error("null output pointer");
            return IonswapStatus::NullPointer;
        }
        let (text, name) = match (str_arg(config_toml), str_arg(command)) {
            (Ok(t), Ok(n)) => (t, n),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let cmd = match name {
            "calibrate" => Command::Calibrate,
            "modes" => Command::Modes,
            "swap" => Command::Swap,
            "optimize-swap" => Command::OptimizeSwap,
            "tomography" => Command::Tomography,
            "reorder" => Command::Reorder,
            "field-map" => Command::FieldMap,
            "rabi-fit" => Command::RabiFit,
            other => {
                set_error(&format!("unknown command {other}"));
                return IonswapStatus::Config;
            }
        };
        let result = RunConfig::from_toml(text).and_then(|cfg| execute(cmd, &cfg, has_seed.then_some(seed)));
        match result {
            Ok(out) => {
                let json = serde_json::to_string(&out.json).expect("json value serializes");
                *out_json = CString::new(json).expect("json has no nul").into_raw();
                IonswapStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Frees a string returned by the library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ionswap_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
