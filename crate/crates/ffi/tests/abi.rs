use std::ffi::{CStr, CString};
use std::ptr;

use neurogp_ffi::*;

const SMALL_COHORT: &str = r#"{"n_patients": 40}"#;
const QUICK_SPEC: &str = r#"{"name": "quick", "feature_mode": "raw_inputs", "kernel": "rbf", "sparse": null,
    "monotonic": null, "optimizer": {"iterations": 5, "step_size": 0.05}, "init_length_sq": 4.0}"#;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    unsafe {
        ng_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn simulate(seed: u64) -> *mut NgCohort {
    let mut c = ptr::null_mut();
    let cfg = cstr(SMALL_COHORT);
    assert_eq!(unsafe { ng_cohort_simulate(cfg.as_ptr(), seed, &mut c) }, NgStatus::Ok);
    assert!(!c.is_null());
    c
}

fn train(c: *const NgCohort) -> *mut NgModel {
    let mut m = ptr::null_mut();
    let spec = cstr(QUICK_SPEC);
    let status = unsafe { ng_model_train(c, spec.as_ptr(), 3, &mut m) };
    assert_eq!(status, NgStatus::Ok, "{}", last_error());
    m
}

fn predict(m: *const NgModel, c: *const NgCohort, id: &str, offsets: &[f64]) -> (NgStatus, Vec<f64>, Vec<f64>) {
    let id = cstr(id);
    let mut mean = vec![f64::NAN; offsets.len()];
    let mut var = vec![f64::NAN; offsets.len()];
    let s = unsafe {
        ng_model_predict(m, c, id.as_ptr(), NgTarget::Mmse, offsets.as_ptr(), offsets.len(), mean.as_mut_ptr(), var.as_mut_ptr())
    };
    (s, mean, var)
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(ng_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn cohort_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(dir.path().join("cohort.csv").to_str().unwrap());
    let c = simulate(1);
    let mut n = 0usize;
    unsafe {
        assert_eq!(ng_cohort_num_patients(c, &mut n), NgStatus::Ok);
        assert_eq!(n, 40);
        assert_eq!(ng_cohort_save_csv(c, path.as_ptr()), NgStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(ng_cohort_load_csv(path.as_ptr(), &mut back), NgStatus::Ok);
        let mut m = 0usize;
        assert_eq!(ng_cohort_num_patients(back, &mut m), NgStatus::Ok);
        assert_eq!(m, n);
        ng_cohort_free(back);
        ng_cohort_free(c);
    }
}

#[test]
fn train_predict_save_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(dir.path().join("model.json").to_str().unwrap());
    let c = simulate(2);
    let m = train(c);
    let offsets = [0.0, 6.0, 12.0];
    let (s, mean, var) = predict(m, c, "P0001", &offsets);
    assert_eq!(s, NgStatus::Ok);
    assert!(mean.iter().all(|v| v.is_finite()));
    assert!(var.iter().all(|v| *v > 0.0));
    unsafe {
        assert_eq!(ng_model_save(m, path.as_ptr()), NgStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(ng_model_load(path.as_ptr(), &mut loaded), NgStatus::Ok);
        let (s2, mean2, var2) = predict(loaded, c, "P0001", &offsets);
        assert_eq!(s2, NgStatus::Ok);
        for i in 0..offsets.len() {
            assert!((mean[i] - mean2[i]).abs() < 1e-12);
            assert!((var[i] - var2[i]).abs() < 1e-12);
        }
        ng_model_free(loaded);
    }

    let (s, _, _) = predict(m, c, "nobody", &offsets);
    assert_eq!(s, NgStatus::UnknownReference);
    assert!(last_error().contains("nobody"));
    unsafe {
        ng_model_free(m);
        ng_cohort_free(c);
    }
}

#[test]
fn null_and_bad_arguments_are_reported() {
    unsafe {
        let mut c = ptr::null_mut();
        assert_eq!(ng_cohort_load_csv(ptr::null(), &mut c), NgStatus::NullArgument);
        assert!(c.is_null());
        assert!(!last_error().is_empty());

        let bad = cstr(r#"{"n_patients": "many"}"#);
        assert_eq!(ng_cohort_simulate(bad.as_ptr(), 0, &mut c), NgStatus::Config);

        let missing = cstr("/nonexistent/dir/cohort.csv");
        assert_eq!(ng_cohort_load_csv(missing.as_ptr(), &mut c), NgStatus::Io);

        let cohort = simulate(4);
        let preset = cstr("no_such_model");
        let mut m = ptr::null_mut();
        assert_eq!(ng_model_train(cohort, preset.as_ptr(), 0, &mut m), NgStatus::Config);
        assert!(m.is_null());
        ng_cohort_free(cohort);

        let mut n = 0usize;
        assert_eq!(ng_cohort_num_patients(ptr::null(), &mut n), NgStatus::NullArgument);
        ng_cohort_free(ptr::null_mut());
        ng_model_free(ptr::null_mut());
    }
}

#[test]
fn success_clears_last_error() {
    unsafe {
        let mut c = ptr::null_mut();
        ng_cohort_load_csv(ptr::null(), &mut c);
        assert!(ng_last_error_message(ptr::null_mut(), 0) > 0);
    }
    let c = simulate(5);
    assert_eq!(unsafe { ng_last_error_message(ptr::null_mut(), 0) }, 0);
    unsafe { ng_cohort_free(c) };
}

#[test]
fn error_message_is_truncated_to_buffer() {
    unsafe {
        let mut c = ptr::null_mut();
        ng_cohort_load_csv(ptr::null(), &mut c);
        let mut buf = [1 as std::ffi::c_char; 4];
        let full = ng_last_error_message(buf.as_mut_ptr(), buf.len());
        assert!(full > 3);
        assert_eq!(buf[3], 0);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/neurogp.h")).unwrap();
    for f in [
        "ng_version",
        "ng_last_error_message",
        "ng_cohort_simulate",
        "ng_cohort_load_csv",
        "ng_cohort_save_csv",
        "ng_cohort_num_patients",
        "ng_cohort_free",
        "ng_model_train",
        "ng_model_load",
        "ng_model_save",
        "ng_model_predict",
        "ng_model_free",
        "typedef struct NgModel NgModel",
        "NG_STATUS_UNKNOWN_REFERENCE",
    ] {
        assert!(header.contains(f), "{f} missing from header");
    }
}
