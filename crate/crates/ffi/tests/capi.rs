use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use cfdist::simgen::{self, BoundsDgpSpec, BoundsVariant, IvDgpSpec, IvOutcome, IvTreatment};
use cfdist_ffi::*;

fn last_error() -> String {
    let p = cfd_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

unsafe fn take_json(p: *mut std::ffi::c_char) -> serde_json::Value {
    let v = serde_json::from_str(CStr::from_ptr(p).to_str().unwrap()).unwrap();
    cfd_string_free(p);
    v
}

#[test]
fn pointwise_and_smooth_min() {
    let (mut lo, mut hi, mut g) = (0.0, 0.0, 0.0);
    unsafe {
        assert_eq!(cfd_fh_pointwise(0.7, 0.6, &mut lo, &mut hi), CfdStatus::Ok);
        assert!((lo - 0.3).abs() < 1e-15 && hi == 0.6);
        assert_eq!(cfd_fh_pointwise(1.5, 0.6, &mut lo, &mut hi), CfdStatus::InvalidArgument);
        assert_eq!(cfd_logsumexp_min(0.2, 0.2, 10.0, &mut g), CfdStatus::Ok);
        assert!((g - (0.2 - 2f64.ln() / 10.0)).abs() < 1e-15);
        assert_eq!(cfd_logsumexp_min(0.2, 0.3, 0.0, &mut g), CfdStatus::InvalidArgument);
        assert!(last_error().contains("t > 0"));
        assert_eq!(cfd_fh_pointwise(0.5, 0.5, ptr::null_mut(), &mut hi), CfdStatus::NullPointer);
    }
    assert!(last_error().contains("lower"));
}

#[test]
fn dataset_validation_errors_surface() {
    let y = [1.0, f64::NAN, 0.5];
    let a = [0.0, 1.0, 1.0];
    let mut ds = ptr::null_mut();
    unsafe {
        assert_eq!(cfd_dataset_new(y.as_ptr(), a.as_ptr(), 3, ptr::null(), 0, ptr::null(), &mut ds), CfdStatus::DataError);
        assert!(ds.is_null());
        assert!(last_error().contains("non-finite"));
        assert_eq!(cfd_dataset_new(ptr::null(), a.as_ptr(), 3, ptr::null(), 0, ptr::null(), &mut ds), CfdStatus::NullPointer);
        let path = CString::new("/nonexistent/table.csv").unwrap();
        assert_eq!(cfd_dataset_load_csv(path.as_ptr(), &mut ds), CfdStatus::Io);
        cfd_dataset_free(ptr::null_mut());
        assert_eq!(cfd_dataset_len(ptr::null()), 0);
    }
}

#[test]
fn bounds_through_the_c_abi_match_the_library() {
    let s = simgen::gen_bounds_dgp(&BoundsDgpSpec { variant: BoundsVariant::LinearScm, n: 600, seed: 3 }).unwrap();
    let y = s.data.ys();
    let a = s.data.treatments();
    let x: Vec<f64> = s.data.covariates().concat();
    let dim = s.data.x_dim();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(cfd_dataset_new(y.as_ptr(), a.as_ptr(), y.len(), x.as_ptr(), dim, ptr::null(), &mut ds), CfdStatus::Ok);
        assert_eq!(cfd_dataset_len(ds), 600);
        let mut cfg = ptr::null_mut();
        let json = CString::new(r#"{"smoothing_t": 20.0, "estimators": {"marginal": false}}"#).unwrap();
        assert_eq!(cfd_config_from_json(json.as_ptr(), &mut cfg), CfdStatus::Ok);
        let (y1, y0) = ([0.5, 1.0], [0.0, 0.2]);
        let mut out = ptr::null_mut();
        assert_eq!(cfd_estimate_bounds(ds, cfg, y1.as_ptr(), y0.as_ptr(), 2, 11, &mut out), CfdStatus::Ok);
        let got = take_json(out);
        let rc = cfdist::RunConfig::from_json(json.to_str().unwrap()).unwrap();
        let want = cfdist::bounds::estimate_bounds(
            &s.data,
            &[(0.5, 0.0), (1.0, 0.2)],
            rc.bounds_folds,
            20.0,
            11,
            &cfdist::nuisance::NuisanceConfig::with_clip(rc.clip_eps),
            (&rc.estimators).into(),
        )
        .unwrap();
        assert_eq!(got, serde_json::to_value(&want).unwrap());
        assert!(got.as_array().unwrap().iter().all(|e| !e["kind"].as_str().unwrap().starts_with("Marginal")));

        let mut cfg_json = ptr::null_mut();
        assert_eq!(cfd_config_to_json(cfg, &mut cfg_json), CfdStatus::Ok);
        assert_eq!(take_json(cfg_json)["smoothing_t"], 20.0);

        // binary pipeline needs an instrument
        assert_eq!(cfd_tml_binary(ds, cfg, 1, &mut out), CfdStatus::DataError);
        assert!(last_error().contains("instrument"));
        cfd_config_free(cfg);
        cfd_dataset_free(ds);
    }
}

#[test]
fn bad_config_json_is_invalid_argument() {
    let mut cfg = ptr::null_mut();
    let json = CString::new(r#"{"k_folds": 1}"#).unwrap();
    unsafe {
        assert_eq!(cfd_config_from_json(json.as_ptr(), &mut cfg), CfdStatus::InvalidArgument);
        assert_eq!(cfd_config_default(&mut cfg), CfdStatus::Ok);
        cfd_config_free(cfg);
    }
}

#[test]
fn instrument_estimators() {
    let s = simgen::gen_iv_dgp(&IvDgpSpec {
        outcome: IvOutcome::Linear,
        treatment: IvTreatment::Continuous,
        n: 2000,
        seed: 5,
    })
    .unwrap();
    let y = s.data.ys();
    let a = s.data.treatments();
    let inst = s.data.instruments().unwrap();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(cfd_dataset_new(y.as_ptr(), a.as_ptr(), y.len(), ptr::null(), 0, inst.as_ptr(), &mut ds), CfdStatus::Ok);
        let (mut beta, mut se) = (0.0, 0.0);
        assert_eq!(cfd_twosls(ds, &mut beta, &mut se), CfdStatus::Ok);
        let fit = cfdist::tml::twosls(&s.data).unwrap();
        assert_eq!((beta, se), (fit.beta, fit.se));

        let mut h = 0.0;
        assert_eq!(cfd_hsic(inst.as_ptr(), s.z_c.as_ptr(), 300, &mut h), CfdStatus::Ok);
        let want = cfdist::hsic::hsic_auto(&cfdist::hsic::scalars(&inst[..300]), &cfdist::hsic::scalars(&s.z_c[..300])).unwrap();
        assert_eq!(h, want);
        let (mut stat, mut p) = (0.0, 0.0);
        assert_eq!(cfd_hsic_test(a.as_ptr(), y.as_ptr(), 300, 99, 1, &mut stat, &mut p), CfdStatus::Ok);
        assert!(p <= 0.01, "treatment drives the outcome, p = {p}");
        assert_eq!(cfd_hsic_test(a.as_ptr(), y.as_ptr(), 300, 10, 1, &mut stat, &mut p), CfdStatus::InvalidArgument);
        cfd_dataset_free(ds);
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(cfd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn generated_header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/cfdist.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["cfd_estimate_bounds", "cfd_tml_binary", "CFD_STATUS_PANIC", "typedef struct CfdDataset CfdDataset"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let main = dir.path().join("main.c");
    std::fs::write(&main, "#include \"cfdist.h\"\nint main(void) { return cfd_version() == 0; }\n").unwrap();
    match std::process::Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&main)
        .output()
    {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("no C compiler available, header syntax not checked: {e}"),
    }
}
