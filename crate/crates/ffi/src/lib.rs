//! C ABI over the neurogp toolkit.
//!
//! Objects are opaque handles created by `ng_*_new`/`ng_*_load`-style calls and
//! released with the matching `ng_*_free`. Every fallible call returns an
//! [`NgStatus`]; on failure, [`ng_last_error_message`] copies a description of
//! the most recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use neurogp::cli::ModelFile;
use neurogp::data::{load_cohort_csv, make_supervised_pairs, save_cohort_csv, simulate_cohort, Cohort, SimConfig, Target};
use neurogp::models::{train_on_pairs, FittedCohort, ModelSpec};
use neurogp::ppl::grid_inputs;
use neurogp::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Numerical = 5,
    UnknownReference = 6,
    Panic = 7,
}

/// Cognitive score predicted by a model.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NgTarget {
    Mmse = 0,
    Adas13 = 1,
    Cdrsb = 2,
}

impl From<NgTarget> for Target {
    fn from(t: NgTarget) -> Target {
        match t {
            NgTarget::Mmse => Target::Mmse,
            NgTarget::Adas13 => Target::Adas13,
            NgTarget::Cdrsb => Target::Cdrsb,
        }
    }
}

/// A patient cohort.
pub struct NgCohort {
    inner: Cohort,
}

/// A trained model, conditioned and ready to predict.
pub struct NgModel {
    file: ModelFile,
    fitted: FittedCohort,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(NgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) => NgStatus::Io,
            Error::UnknownReference(_) | Error::EmptyPatient => NgStatus::UnknownReference,
            _ => match e.exit_code() {
                3 => NgStatus::Numerical,
                4 => NgStatus::UnknownReference,
                _ => NgStatus::Config,
            },
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(NgStatus::Config, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(NgStatus::NullArgument, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            NgStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            NgStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(NgStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes, excluding
/// the terminator; 0 when the last call succeeded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ng_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ng_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Simulates a cohort. `config_json` may be null for the default simulator
/// settings, or a JSON object overriding some of them.
///
/// # Safety
/// `config_json` must be null or a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ng_cohort_simulate(config_json: *const c_char, seed: u64, out: *mut *mut NgCohort) -> NgStatus {
    guard(|| {
        let cfg: SimConfig = match opt_str_arg(config_json, "config_json")? {
            Some(s) => serde_json::from_str(s)?,
            None => SimConfig::default(),
        };
        put(out, NgCohort { inner: simulate_cohort(&cfg, seed)? })
    })
}

/// Loads a long-format cohort CSV.
///
/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ng_cohort_load_csv(path: *const c_char, out: *mut *mut NgCohort) -> NgStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        put(out, NgCohort { inner: load_cohort_csv(&path)? })
    })
}

/// Writes a cohort as long-format CSV.
///
/// # Safety
/// `cohort` must come from this library; `path` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn ng_cohort_save_csv(cohort: *const NgCohort, path: *const c_char) -> NgStatus {
    guard(|| {
        let c = cohort.as_ref().ok_or_else(|| null("cohort"))?;
        save_cohort_csv(&c.inner, &PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Number of patients in the cohort.
///
/// # Safety
/// `cohort` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ng_cohort_num_patients(cohort: *const NgCohort, out: *mut usize) -> NgStatus {
    guard(|| {
        let c = cohort.as_ref().ok_or_else(|| null("cohort"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = c.inner.patients.len();
        Ok(())
    })
}

/// Releases a cohort; null is ignored.
///
/// # Safety
/// `cohort` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ng_cohort_free(cohort: *mut NgCohort) {
    if !cohort.is_null() {
        drop(Box::from_raw(cohort));
    }
}

fn fit(file: ModelFile) -> Result<NgModel, Failure> {
    let fitted = file.model.fit()?;
    Ok(NgModel { file, fitted })
}

/// Trains one model per score on the cohort with a 12-month horizon.
/// `spec` is a preset name (`exact_gp`, `dkl`, `pp_dkl`, `pp_dkl_prime`) or a
/// JSON model specification; null selects `pp_dkl`.
///
/// # Safety
/// `cohort` must come from this library; `spec` must be null or a valid C
/// string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ng_model_train(cohort: *const NgCohort, spec: *const c_char, seed: u64, out: *mut *mut NgModel) -> NgStatus {
    guard(|| {
        let c = &cohort.as_ref().ok_or_else(|| null("cohort"))?.inner;
        let spec = match opt_str_arg(spec, "spec")? {
            None => ModelSpec::pp_dkl(),
            Some(s) if s.trim_start().starts_with('{') => serde_json::from_str(s)?,
            Some(s) => ModelSpec::preset(s)?,
        };
        let horizon = neurogp::data::DEFAULT_HORIZON;
        let tol = neurogp::data::DEFAULT_MATCH_TOL;
        let pairs = make_supervised_pairs(c, horizon, tol)?;
        let model = train_on_pairs(&spec, &pairs, c.k(), horizon, neurogp::data::DEFAULT_VARIANCE_FRACTION, &Target::ALL, seed)?;
        put(out, fit(ModelFile::new(model, c.biomarker_names.clone(), tol, seed))?)
    })
}

/// Loads a model file written by [`ng_model_save`] or the command-line tool.
///
/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ng_model_load(path: *const c_char, out: *mut *mut NgModel) -> NgStatus {
    guard(|| {
        let file = ModelFile::load(&PathBuf::from(str_arg(path, "path")?))?;
        put(out, fit(file)?)
    })
}

/// # Safety
/// `model` must come from this library; `path` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn ng_model_save(model: *const NgModel, path: *const c_char) -> NgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        m.file.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Predicts one score for a cohort patient at `n` times, given in months
/// after the patient's last visit. Writes `n` means and `n` latent variances.
///
/// # Safety
/// `model` and `cohort` must come from this library; `patient_id` must be a
/// valid C string; `offsets`, `mean_out` and `var_out` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn ng_model_predict(
    model: *const NgModel,
    cohort: *const NgCohort,
    patient_id: *const c_char,
    target: NgTarget,
    offsets: *const f64,
    n: usize,
    mean_out: *mut f64,
    var_out: *mut f64,
) -> NgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = &cohort.as_ref().ok_or_else(|| null("cohort"))?.inner;
        let id = str_arg(patient_id, "patient_id")?;
        if n == 0 {
            return Ok(());
        }
        if offsets.is_null() || mean_out.is_null() || var_out.is_null() {
            return Err(null("offsets or output buffer"));
        }
        let patient = c.patient(id).ok_or_else(|| Failure(NgStatus::UnknownReference, format!("unknown patient {id}")))?;
        let fitted = m
            .fitted
            .target(target.into())
            .ok_or_else(|| Failure(NgStatus::UnknownReference, format!("model has no {} predictor", Target::from(target).name())))?;
        let last = patient.visits.last().ok_or(Error::EmptyPatient)?.time_months;
        let times: Vec<f64> = std::slice::from_raw_parts(offsets, n).iter().map(|o| last + o).collect();
        let x = grid_inputs(&m.fitted.pipeline, patient, m.fitted.horizon, &times)?;
        let p = fitted.predict(&x)?;
        std::slice::from_raw_parts_mut(mean_out, n).copy_from_slice(p.mean.as_slice());
        std::slice::from_raw_parts_mut(var_out, n).copy_from_slice(p.latent_var.as_slice());
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ng_model_free(model: *mut NgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
