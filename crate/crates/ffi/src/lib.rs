//! C ABI for the `cfdist` estimators.
//!
//! Every fallible call returns a [`CfdStatus`]; on failure the message is
//! available from [`cfd_last_error`] on the same thread. Datasets and
//! configurations are opaque handles released with their `_free` function.
//! Strings returned through out-pointers are owned by the caller and must
//! be released with [`cfd_string_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cfdist::bounds::{self, BoundSelection};
use cfdist::hsic;
use cfdist::nuisance::NuisanceConfig;
use cfdist::tml::{self, DoseGrid};
use cfdist::{Dataset, Error, Observation, RunConfig};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    NumericFailure = 4,
    Io = 5,
    Panic = 6,
}

/// Opaque validated dataset.
pub struct CfdDataset(Dataset);

/// Opaque run configuration.
pub struct CfdConfig(RunConfig);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CfdStatus {
    match e {
        Error::IoFailure(_) => CfdStatus::Io,
        Error::OutOfRange(_) | Error::LengthMismatch(..) => CfdStatus::InvalidArgument,
        Error::Replicate { source, .. } => status_of(source),
        _ => match e.exit_code() {
            2 => CfdStatus::InvalidArgument,
            3 => CfdStatus::DataError,
            _ => CfdStatus::NumericFailure,
        },
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, recording any error or panic for [`cfd_last_error`].
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CfdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CfdStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            CfdStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(&msg);
            CfdStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            CfdStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail::Null(what))
    } else {
        Ok(())
    }
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    non_null(p, what)?;
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn write_json<T: serde::Serialize>(value: &T, out: *mut *mut c_char) -> Result<(), Fail> {
    let s = serde_json::to_string(value).map_err(|e| Fail::Lib(e.into()))?;
    *out = CString::new(s).expect("JSON has no nul bytes").into_raw();
    Ok(())
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    non_null(p, what)?;
    Ok(&*p)
}

/// Last error message on this thread, or null. Valid until the next failing
/// call on the same thread.
#[no_mangle]
pub extern "C" fn cfd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn cfd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cfd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a dataset from column arrays of length `n`. `x` is row-major
/// `n * x_dim` and may be null when `x_dim == 0`; `s` may be null.
///
/// # Safety
/// Non-null pointers must reference arrays of the stated lengths; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfd_dataset_new(
    y: *const f64,
    a: *const f64,
    n: usize,
    x: *const f64,
    x_dim: usize,
    s: *const f64,
    out: *mut *mut CfdDataset,
) -> CfdStatus {
    guard(|| {
        non_null(out, "out")?;
        let y = slice(y, n, "y")?;
        let a = slice(a, n, "a")?;
        let x = slice(x, n * x_dim, "x")?;
        let s = if s.is_null() { None } else { Some(slice(s, n, "s")?) };
        let rows = (0..n)
            .map(|i| {
                let mut o = Observation::new(y[i], a[i]);
                if x_dim > 0 {
                    o = o.with_x(x[i * x_dim..(i + 1) * x_dim].to_vec());
                }
                if let Some(s) = s {
                    o = o.with_s(s[i]);
                }
                o
            })
            .collect();
        *out = Box::into_raw(Box::new(CfdDataset(Dataset::from_rows(rows)?)));
        Ok(())
    })
}

/// Loads a dataset from a CSV file with columns `y`, `a` and `x1..xd`
/// and/or `s`.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfd_dataset_load_csv(path: *const c_char, out: *mut *mut CfdDataset) -> CfdStatus {
    guard(|| {
        non_null(out, "out")?;
        let p = str_arg(path, "path")?;
        *out = Box::into_raw(Box::new(CfdDataset(Dataset::load_csv(Path::new(p))?)));
        Ok(())
    })
}

/// Number of rows, or 0 for null.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cfd_dataset_len(ds: *const CfdDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.n())
}

/// # Safety
/// `ds` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cfd_dataset_free(ds: *mut CfdDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Default configuration.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfd_config_default(out: *mut *mut CfdConfig) -> CfdStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = Box::into_raw(Box::new(CfdConfig(RunConfig::default())));
        Ok(())
    })
}

/// Configuration from a JSON document; absent keys take their defaults.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfd_config_from_json(json: *const c_char, out: *mut *mut CfdConfig) -> CfdStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg = RunConfig::from_json(str_arg(json, "json")?)?;
        *out = Box::into_raw(Box::new(CfdConfig(cfg)));
        Ok(())
    })
}

/// The configuration as JSON, written to `*out`.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfd_config_to_json(cfg: *const CfdConfig, out: *mut *mut c_char) -> CfdStatus {
    guard(|| {
        non_null(out, "out")?;
        let c = handle(cfg, "cfg")?;
        *out = CString::new(c.0.to_json()).expect("JSON has no nul bytes").into_raw();
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cfd_config_free(cfg: *mut CfdConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Pointwise Fréchet–Hoeffding bounds of two CDF values in [0, 1].
///
/// # Safety
/// `lower` and `upper` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfd_fh_pointwise(u1: f64, u0: f64, lower: *mut f64, upper: *mut f64) -> CfdStatus {
    guard(|| {
        non_null(lower, "lower")?;
        non_null(upper, "upper")?;
        let (l, u) = bounds::fh_pointwise(u1, u0)?;
        *lower = l;
        *upper = u;
        Ok(())
    })
}

/// Smooth minimum `-(1/t) ln(exp(-t u) + exp(-t v))`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfd_logsumexp_min(u: f64, v: f64, t: f64, out: *mut f64) -> CfdStatus {
    guard(|| {
        non_null(out, "out")?;
        if !(t > 0.0 && u.is_finite() && v.is_finite()) {
            return Err(Fail::Arg(format!("need finite u, v and t > 0, got u={u}, v={v}, t={t}")));
        }
        *out = bounds::logsumexp_min(u, v, t);
        Ok(())
    })
}

/// Cross-fitted bound estimates at `n_pairs` threshold pairs (or the default
/// 3 x 3 quantile grid when `n_pairs == 0`), as a JSON array written to
/// `*out`. Uses the configuration's bound folds, smoothing, clipping and
/// estimator flags.
///
/// # Safety
/// Handles must be live; `y1`/`y0` must hold `n_pairs` values; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn cfd_estimate_bounds(
    ds: *const CfdDataset,
    cfg: *const CfdConfig,
    y1: *const f64,
    y0: *const f64,
    n_pairs: usize,
    seed: u64,
    out: *mut *mut c_char,
) -> CfdStatus {
    guard(|| {
        non_null(out, "out")?;
        let d = &handle(ds, "ds")?.0;
        let c = &handle(cfg, "cfg")?.0;
        c.validate()?;
        let pairs: Vec<(f64, f64)> = if n_pairs == 0 {
            bounds::default_thresholds(d)
        } else {
            let (a, b) = (slice(y1, n_pairs, "y1")?, slice(y0, n_pairs, "y0")?);
            a.iter().copied().zip(b.iter().copied()).collect()
        };
        let est = bounds::estimate_bounds(
            d,
            &pairs,
            c.bounds_folds,
            c.smoothing_t,
            seed,
            &NuisanceConfig::with_clip(c.clip_eps),
            BoundSelection::from(&c.estimators),
        )?;
        write_json(&est, out)
    })
}

/// Triple cross-fitted means and ATE for a binary treatment with an
/// instrument column, as a JSON array written to `*out`.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfd_tml_binary(
    ds: *const CfdDataset,
    cfg: *const CfdConfig,
    seed: u64,
    out: *mut *mut c_char,
) -> CfdStatus {
    guard(|| {
        non_null(out, "out")?;
        let est = tml::run_tml_binary(&handle(ds, "ds")?.0, &handle(cfg, "cfg")?.0, seed)?;
        write_json(&est, out)
    })
}

/// Dose-response curve for a continuous treatment with an instrument column,
/// as a JSON array written to `*out`. Doses come from the configuration's
/// grid, or the default 25-point grid when it is empty.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfd_tml_continuous(
    ds: *const CfdDataset,
    cfg: *const CfdConfig,
    seed: u64,
    out: *mut *mut c_char,
) -> CfdStatus {
    guard(|| {
        non_null(out, "out")?;
        let d = &handle(ds, "ds")?.0;
        let c = &handle(cfg, "cfg")?.0;
        let grid = if c.grid.doses.is_empty() {
            DoseGrid::default_for(d)?
        } else {
            DoseGrid::with_doses(d, c.grid.doses.clone())?
        };
        let est = tml::run_tml_continuous(d, c, &grid, seed)?;
        write_json(&est, out)
    })
}

/// Just-identified IV slope of `y` on `a` with instrument `s`.
///
/// # Safety
/// `ds` must be live; `beta` and `se` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfd_twosls(ds: *const CfdDataset, beta: *mut f64, se: *mut f64) -> CfdStatus {
    guard(|| {
        non_null(beta, "beta")?;
        non_null(se, "se")?;
        let fit = tml::twosls(&handle(ds, "ds")?.0)?;
        *beta = fit.beta;
        *se = fit.se;
        Ok(())
    })
}

/// Biased HSIC between two scalar samples with median-heuristic RBF
/// bandwidths.
///
/// # Safety
/// `x` and `y` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfd_hsic(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> CfdStatus {
    guard(|| {
        non_null(out, "out")?;
        let (x, y) = (slice(x, n, "x")?, slice(y, n, "y")?);
        *out = hsic::hsic_auto(&hsic::scalars(x), &hsic::scalars(y))?;
        Ok(())
    })
}

/// HSIC permutation test; writes the statistic and p-value.
///
/// # Safety
/// `x` and `y` must hold `n` values; `stat` and `p_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfd_hsic_test(
    x: *const f64,
    y: *const f64,
    n: usize,
    n_perm: usize,
    seed: u64,
    stat: *mut f64,
    p_value: *mut f64,
) -> CfdStatus {
    guard(|| {
        non_null(stat, "stat")?;
        non_null(p_value, "p_value")?;
        let (x, y) = (slice(x, n, "x")?, slice(y, n, "y")?);
        let r = hsic::permutation_test_auto(&hsic::scalars(x), &hsic::scalars(y), n_perm, seed)?;
        *stat = r.statistic;
        *p_value = r.p_value.unwrap_or(f64::NAN);
        Ok(())
    })
}
