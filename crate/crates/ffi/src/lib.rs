//! C ABI over the solver core: opaque handles for ensembles and bases,
//! status codes mirroring the library's error variants, a thread-local last
//! error message, and a JSON-config batch entry point that returns CSV.
//!
//! Every function is panic-safe: panics are caught and reported as
//! `BSDE_DRO_STATUS_PANIC` instead of unwinding across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use bsde_dro::basis::BasisSpec;
use bsde_dro::bsde::{solve_bsde, TerminalSpec};
use bsde_dro::config::{rows_to_csv, run_experiment, ExperimentConfig};
use bsde_dro::generators::{ControlledCoefficients, GeneratorSpec};
use bsde_dro::paths::{make_grid, simulate_brownian, PathEnsemble};
use bsde_dro::sensitivity::{sensitivity_l2_control, sensitivity_linf_bsde};
use bsde_dro::Error;

/// Status code returned by every fallible function.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsdeDroStatus {
    Ok = 0,
    InvalidArgument = 1,
    InvalidState = 2,
    NumericFailure = 3,
    RegressionFailure = 4,
    AssumptionViolation = 5,
    ConfigError = 6,
    IoError = 7,
    NullPointer = 8,
    InvalidUtf8 = 9,
    Panic = 10,
}

/// Terminal payoff selector for the built-in problems.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsdeDroTerminal {
    /// Constant payoff; `terminal_param` is the constant.
    Constant = 0,
    /// First coordinate of the path at the horizon; `terminal_param` unused.
    TerminalValue = 1,
}

/// A point estimate with its Monte-Carlo standard error.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BsdeDroEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Opaque Brownian ensemble handle.
pub struct BsdeDroEnsemble {
    inner: PathEnsemble,
}

/// Opaque regression basis handle.
pub struct BsdeDroBasis {
    inner: BasisSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap_or_default());
}

fn status_of(err: &Error) -> BsdeDroStatus {
    match err {
        Error::InvalidArgument(_) => BsdeDroStatus::InvalidArgument,
        Error::InvalidState(_) => BsdeDroStatus::InvalidState,
        Error::NumericFailure { .. } => BsdeDroStatus::NumericFailure,
        Error::RegressionFailure { .. } => BsdeDroStatus::RegressionFailure,
        Error::AssumptionViolation(_) => BsdeDroStatus::AssumptionViolation,
        Error::Config(_) => BsdeDroStatus::ConfigError,
        Error::Io(_) => BsdeDroStatus::IoError,
    }
}

fn fail(err: &Error) -> BsdeDroStatus {
    set_error(&err.to_string());
    status_of(err)
}

fn guard(f: impl FnOnce() -> BsdeDroStatus) -> BsdeDroStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("panic across the C boundary");
            BsdeDroStatus::Panic
        }
    }
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length in bytes, excluding
/// the terminator; call with `cap = 0` to query the length.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or be null when `cap` is 0.
#[no_mangle]
pub unsafe extern "C" fn bsde_dro_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if cap > 0 && !buf.is_null() {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Create a Brownian ensemble; identical arguments produce bit-identical
/// paths regardless of thread counts.
///
/// # Safety
/// `out` must be a valid pointer; on success it receives an owned handle
/// that must be released with `bsde_dro_ensemble_free`.
#[no_mangle]
pub unsafe extern "C" fn bsde_dro_ensemble_create(
    horizon: f64,
    n_steps: usize,
    dim: usize,
    n_paths: usize,
    seed: u64,
    out: *mut *mut BsdeDroEnsemble,
) -> BsdeDroStatus {
    if out.is_null() {
        set_error("out pointer is null");
        return BsdeDroStatus::NullPointer;
    }
    guard(|| {
        let built = make_grid(horizon, n_steps)
            .and_then(|grid| simulate_brownian(&grid, dim, n_paths, seed));
        match built {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(BsdeDroEnsemble { inner }));
                BsdeDroStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Release an ensemble handle. Null is a no-op.
///
/// # Safety
/// `ens` must be a handle from `bsde_dro_ensemble_create`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bsde_dro_ensemble_free(ens: *mut BsdeDroEnsemble) {
    if !ens.is_null() {
        drop(Box::from_raw(ens));
    }
}

/// Number of simulated paths in the ensemble; 0 when the handle is null.
///
/// # Safety
/// `ens` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn bsde_dro_ensemble_n_paths(ens: *const BsdeDroEnsemble) -> usize {
    ens.as_ref().map_or(0, |e| e.inner.n_paths())
}

/// Create a polynomial regression basis of the given total degree.
///
/// # Safety
/// `out` must be a valid pointer; on success it receives an owned handle
/// that must be released with `bsde_dro_basis_free`.
#[no_mangle]
pub unsafe extern "C" fn bsde_dro_basis_create(
    degree: usize,
    out: *mut *mut BsdeDroBasis,
) -> BsdeDroStatus {
    if out.is_null() {
        set_error("out pointer is null");
        return BsdeDroStatus::NullPointer;
    }
    guard(|| match BasisSpec::polynomial(degree) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(BsdeDroBasis { inner }));
            BsdeDroStatus::Ok
        }
        Err(e) => fail(&e),
    })
}

/// Release a basis handle. Null is a no-op.
///
/// # Safety
/// `basis` must be a handle from `bsde_dro_basis_create`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bsde_dro_basis_free(basis: *mut BsdeDroBasis) {
    if !basis.is_null() {
        drop(Box::from_raw(basis));
    }
}

unsafe fn build_problem(
    ens: *const BsdeDroEnsemble,
    drift_b: *const f64,
    drift_len: usize,
    gen_a: f64,
    terminal: BsdeDroTerminal,
    terminal_param: f64,
) -> Result<(GeneratorSpec, TerminalSpec), BsdeDroStatus> {
    let ens = match ens.as_ref() {
        Some(e) => e,
        None => {
            set_error("ensemble handle is null");
            return Err(BsdeDroStatus::NullPointer);
        }
    };
    let b = if drift_len == 0 {
        vec![0.0; ens.inner.dim()]
    } else {
        if drift_b.is_null() {
            set_error("drift coefficient pointer is null");
            return Err(BsdeDroStatus::NullPointer);
        }
        std::slice::from_raw_parts(drift_b, drift_len).to_vec()
    };
    if b.len() != ens.inner.dim() {
        set_error("drift coefficient length does not match the ensemble dimension");
        return Err(BsdeDroStatus::InvalidArgument);
    }
    let f = if gen_a == 0.0 && b.iter().all(|&x| x == 0.0) {
        GeneratorSpec::zero()
    } else {
        GeneratorSpec::linear(gen_a, b)
    };
    let xi = match terminal {
        BsdeDroTerminal::Constant => TerminalSpec::constant(terminal_param),
        BsdeDroTerminal::TerminalValue => TerminalSpec::terminal_value(),
    };
    Ok((f, xi))
}

/// Solve the linear-driver BSDE `dY = Z dX - (a Y + b . Z) dt` with the
/// selected terminal payoff, writing the time-0 value into `out`.
///
/// # Safety
/// `ens` and `basis` must be live handles, `drift_b` must point to
/// `drift_len` doubles (or be null with `drift_len = 0` for no `z` term),
/// and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bsde_dro_solve_linear_bsde(
    ens: *const BsdeDroEnsemble,
    basis: *const BsdeDroBasis,
    gen_a: f64,
    drift_b: *const f64,
    drift_len: usize,
    terminal: BsdeDroTerminal,
    terminal_param: f64,
    out: *mut BsdeDroEstimate,
) -> BsdeDroStatus {
    if out.is_null() || basis.is_null() {
        set_error("null pointer argument");
        return BsdeDroStatus::NullPointer;
    }
    guard(|| {
        let (f, xi) = match build_problem(ens, drift_b, drift_len, gen_a, terminal, terminal_param)
        {
            Ok(v) => v,
            Err(s) => return s,
        };
        match solve_bsde(&f, &xi, &(*ens).inner, &(*basis).inner) {
            Ok(sol) => {
                *out = BsdeDroEstimate {
                    value: sol.y0,
                    std_error: sol.y0_se,
                };
                BsdeDroStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// First-order L-infinity drift sensitivity of the linear-driver BSDE.
///
/// # Safety
/// Same contract as `bsde_dro_solve_linear_bsde`.
#[no_mangle]
pub unsafe extern "C" fn bsde_dro_sensitivity_linf(
    ens: *const BsdeDroEnsemble,
    basis: *const BsdeDroBasis,
    gen_a: f64,
    drift_b: *const f64,
    drift_len: usize,
    terminal: BsdeDroTerminal,
    terminal_param: f64,
    out: *mut BsdeDroEstimate,
) -> BsdeDroStatus {
    if out.is_null() || basis.is_null() {
        set_error("null pointer argument");
        return BsdeDroStatus::NullPointer;
    }
    guard(|| {
        let (f, xi) = match build_problem(ens, drift_b, drift_len, gen_a, terminal, terminal_param)
        {
            Ok(v) => v,
            Err(s) => return s,
        };
        match sensitivity_linf_bsde(&f, &xi, &(*ens).inner, &(*basis).inner) {
            Ok(rep) => {
                *out = BsdeDroEstimate {
                    value: rep.value,
                    std_error: rep.std_error,
                };
                BsdeDroStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// First-order L2 drift sensitivity of the terminal payoff under the trivial
/// (uncontrolled) coefficients.
///
/// # Safety
/// `ens` and `basis` must be live handles, `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bsde_dro_sensitivity_l2(
    ens: *const BsdeDroEnsemble,
    basis: *const BsdeDroBasis,
    terminal: BsdeDroTerminal,
    terminal_param: f64,
    out: *mut BsdeDroEstimate,
) -> BsdeDroStatus {
    if out.is_null() || basis.is_null() || ens.is_null() {
        set_error("null pointer argument");
        return BsdeDroStatus::NullPointer;
    }
    guard(|| {
        let xi = match terminal {
            BsdeDroTerminal::Constant => TerminalSpec::constant(terminal_param),
            BsdeDroTerminal::TerminalValue => TerminalSpec::terminal_value(),
        };
        let dim = (*ens).inner.dim();
        let coeffs = ControlledCoefficients::singleton(0.0, 0.0, vec![0.0; dim]);
        match sensitivity_l2_control(&coeffs, &xi, &(*ens).inner, &(*basis).inner) {
            Ok(rep) => {
                *out = BsdeDroEstimate {
                    value: rep.value,
                    std_error: rep.std_error,
                };
                BsdeDroStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Run a full JSON experiment config and return the result rows as a CSV
/// string (owned by the caller; release with `bsde_dro_string_free`).
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out_csv` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn bsde_dro_run_config(
    config_json: *const c_char,
    out_csv: *mut *mut c_char,
) -> BsdeDroStatus {
    if config_json.is_null() || out_csv.is_null() {
        set_error("null pointer argument");
        return BsdeDroStatus::NullPointer;
    }
    guard(|| {
        let text = match CStr::from_ptr(config_json).to_str() {
            Ok(t) => t,
            Err(_) => {
                set_error("config is not valid UTF-8");
                return BsdeDroStatus::InvalidUtf8;
            }
        };
        let cfg = match ExperimentConfig::from_json(text) {
            Ok(c) => c,
            Err(e) => return fail(&e),
        };
        match run_experiment(&cfg) {
            Ok(rows) => {
                let csv = rows_to_csv(&rows);
                match CString::new(csv) {
                    Ok(c) => {
                        *out_csv = c.into_raw();
                        BsdeDroStatus::Ok
                    }
                    Err(_) => {
                        set_error("CSV contains an interior NUL");
                        BsdeDroStatus::InvalidState
                    }
                }
            }
            Err(e) => fail(&e),
        }
    })
}

/// Release a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must come from a function of this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bsde_dro_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
