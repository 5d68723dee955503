//! C ABI over the `kfacsim` library.
//!
//! Every function returns a [`KfacsimStatus`]. On failure the message is kept
//! in a thread-local slot readable through [`kfacsim_last_error`]. Objects are
//! opaque handles released with their matching `_free` function. Strings
//! returned to the caller are released with [`kfacsim_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use kfacsim::distsim::lpt_schedule;
use kfacsim::harness::{run_experiment, ExperimentConfig, ExperimentResult};
use kfacsim::kfac::{
    accumulate_factors, compute_eigen, precondition, update_running_factors, KfacLayerState, Precision,
};
use kfacsim::linalg::round_to_half;
use kfacsim::{DenseMatrix, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KfacsimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Dimension = 4,
    Singular = 5,
    State = 6,
    Consistency = 7,
    Io = 8,
    Panic = 9,
}

/// Opaque experiment configuration.
pub struct KfacsimConfig {
    inner: ExperimentConfig,
}

/// Opaque result of one training run.
pub struct KfacsimRun {
    inner: ExperimentResult,
}

/// One metrics row. Phase times follow the CSV column order.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct KfacsimMetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub train_loss: f64,
    pub valid_accuracy: f64,
    pub sim_time: f64,
    pub phase_forward: f64,
    pub phase_backward: f64,
    pub phase_grad_allreduce: f64,
    pub phase_factor: f64,
    pub phase_eigen: f64,
    pub phase_precond: f64,
    pub phase_bcast: f64,
    pub kfac_bytes: f64,
    pub peak_overhead_bytes: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> KfacsimStatus {
    match e {
        Error::Config { .. } => KfacsimStatus::Config,
        Error::Dimension(_) => KfacsimStatus::Dimension,
        Error::Singular(_) => KfacsimStatus::Singular,
        Error::State(_) => KfacsimStatus::State,
        Error::Consistency(_) => KfacsimStatus::Consistency,
        Error::Io(_) => KfacsimStatus::Io,
    }
}

struct Fail(KfacsimStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(KfacsimStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> KfacsimStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KfacsimStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside kfacsim".into());
            KfacsimStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(KfacsimStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_arg_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn to_c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail(KfacsimStatus::InvalidArgument, "string contains NUL".into()))
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn kfacsim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kfacsim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn kfacsim_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default configuration with the given seed.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kfacsim_config_default(seed: u64, out: *mut *mut KfacsimConfig) -> KfacsimStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        *out = Box::into_raw(Box::new(KfacsimConfig { inner }));
        Ok(())
    })
}

/// Parses the `key = value` config format.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kfacsim_config_parse(text: *const c_char, out: *mut *mut KfacsimConfig) -> KfacsimStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = ExperimentConfig::parse(str_arg(text, "text")?)?;
        *out = Box::into_raw(Box::new(KfacsimConfig { inner }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kfacsim_config_load(path: *const c_char, out: *mut *mut KfacsimConfig) -> KfacsimStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = ExperimentConfig::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(KfacsimConfig { inner }));
        Ok(())
    })
}

/// Sets one key and revalidates; the config is unchanged on failure.
///
/// # Safety
/// `config` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn kfacsim_config_set(
    config: *mut KfacsimConfig,
    key: *const c_char,
    value: *const c_char,
) -> KfacsimStatus {
    guard(|| {
        let cfg = config.as_mut().ok_or_else(|| null("config"))?;
        let mut next = cfg.inner.clone();
        next.set(str_arg(key, "key")?, str_arg(value, "value")?)?;
        next.validate()?;
        cfg.inner = next;
        Ok(())
    })
}

/// Serializes the config; free the string with [`kfacsim_string_free`].
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kfacsim_config_to_text(config: *const KfacsimConfig, out: *mut *mut c_char) -> KfacsimStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = to_c_string(cfg.inner.to_text())?;
        Ok(())
    })
}

/// # Safety
/// `config` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kfacsim_config_free(config: *mut KfacsimConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs the configured experiment to completion.
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kfacsim_run(config: *const KfacsimConfig, out: *mut *mut KfacsimRun) -> KfacsimStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = run_experiment(&cfg.inner)?;
        *out = Box::into_raw(Box::new(KfacsimRun { inner }));
        Ok(())
    })
}

/// Number of metric rows; 0 for a null handle.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kfacsim_run_row_count(run: *const KfacsimRun) -> usize {
    run.as_ref().map_or(0, |r| r.inner.rows.len())
}

/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kfacsim_run_row(
    run: *const KfacsimRun,
    index: usize,
    out: *mut KfacsimMetricsRow,
) -> KfacsimStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let row = r.inner.rows.get(index).ok_or_else(|| {
            Fail(
                KfacsimStatus::InvalidArgument,
                format!("row {index} out of range ({} rows)", r.inner.rows.len()),
            )
        })?;
        let p = row.phases.0;
        *out = KfacsimMetricsRow {
            step: row.step as u64,
            epoch: row.epoch as u64,
            train_loss: row.train_loss,
            valid_accuracy: row.valid_accuracy,
            sim_time: row.sim_time,
            phase_forward: p[0],
            phase_backward: p[1],
            phase_grad_allreduce: p[2],
            phase_factor: p[3],
            phase_eigen: p[4],
            phase_precond: p[5],
            phase_bcast: p[6],
            kfac_bytes: row.kfac_bytes,
            peak_overhead_bytes: row.peak_overhead_bytes as u64,
        };
        Ok(())
    })
}

/// Steps taken when the target was first reached, or -1 if it never was.
///
/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kfacsim_run_steps_to_target(run: *const KfacsimRun, out: *mut i64) -> KfacsimStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = r.inner.summary.steps_to_target.map_or(-1, |s| s as i64);
        Ok(())
    })
}

/// Writes the metrics CSV to `path`.
///
/// # Safety
/// `run` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn kfacsim_run_write_csv(run: *const KfacsimRun, path: *const c_char) -> KfacsimStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        std::fs::write(str_arg(path, "path")?, r.inner.csv()).map_err(Error::from)?;
        Ok(())
    })
}

/// Summary in `key = value` form; free with [`kfacsim_string_free`].
///
/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kfacsim_run_summary(run: *const KfacsimRun, out: *mut *mut c_char) -> KfacsimStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = to_c_string(r.inner.summary.to_text())?;
        Ok(())
    })
}

/// # Safety
/// `run` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kfacsim_run_free(run: *mut KfacsimRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Preconditions one layer gradient from raw factors via eigen decomposition.
///
/// `a` is `a_dim × a_dim`, `g` is `g_dim × g_dim`, `grad` and `out` are
/// `g_dim × a_dim`, all row-major.
///
/// # Safety
/// Every pointer must reference at least the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn kfacsim_precondition(
    a: *const f64,
    a_dim: usize,
    g: *const f64,
    g_dim: usize,
    grad: *const f64,
    damping: f64,
    out: *mut f64,
) -> KfacsimStatus {
    guard(|| {
        if a_dim == 0 || g_dim == 0 {
            return Err(Fail(
                KfacsimStatus::InvalidArgument,
                "dimensions must be positive".into(),
            ));
        }
        if !(damping > 0.0 && damping.is_finite()) {
            return Err(Fail(KfacsimStatus::InvalidArgument, "damping must be positive".into()));
        }
        let a = DenseMatrix::new(a_dim, a_dim, slice_arg(a, a_dim * a_dim, "a")?.to_vec())?;
        let g = DenseMatrix::new(g_dim, g_dim, slice_arg(g, g_dim * g_dim, "g")?.to_vec())?;
        let grad = DenseMatrix::new(g_dim, a_dim, slice_arg(grad, g_dim * a_dim, "grad")?.to_vec())?;
        let out = slice_arg_mut(out, g_dim * a_dim, "out")?;
        let mut state = KfacLayerState::with_dims(a_dim, g_dim);
        accumulate_factors(&mut state, &a, &g)?;
        update_running_factors(&mut state, 0.0, Precision::Full)?;
        compute_eigen(&mut state, damping, Precision::Full)?;
        out.copy_from_slice(precondition(&state, &grad)?.data());
        Ok(())
    })
}

/// Greedy longest-processing-time schedule of `n` jobs onto `workers`.
///
/// # Safety
/// `costs` and `assignment` must hold `n` elements; `makespan` must be valid.
#[no_mangle]
pub unsafe extern "C" fn kfacsim_lpt_schedule(
    costs: *const f64,
    n: usize,
    workers: usize,
    assignment: *mut usize,
    makespan: *mut f64,
) -> KfacsimStatus {
    guard(|| {
        if workers == 0 {
            return Err(Fail(KfacsimStatus::InvalidArgument, "need at least one worker".into()));
        }
        let costs = slice_arg(costs, n, "costs")?;
        if costs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Fail(
                KfacsimStatus::InvalidArgument,
                "costs must be finite and non-negative".into(),
            ));
        }
        let out = slice_arg_mut(assignment, n, "assignment")?;
        let makespan = makespan.as_mut().ok_or_else(|| null("makespan"))?;
        let (assign, span) = lpt_schedule(costs, workers);
        out.copy_from_slice(&assign);
        *makespan = span;
        Ok(())
    })
}

/// Rounds `n` values in place to the nearest binary16 value.
///
/// # Safety
/// `values` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn kfacsim_quantize_half(values: *mut f64, n: usize) -> KfacsimStatus {
    guard(|| {
        for v in slice_arg_mut(values, n, "values")? {
            *v = round_to_half(*v);
        }
        Ok(())
    })
}
