use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use pcn_ffi::*;

fn last_error() -> String {
    let p = pcn_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn dataset_and_model_round_trip() {
    unsafe {
        let preset = CString::new("weak_arterial").unwrap();
        let mut d = ptr::null_mut();
        assert_eq!(pcn_dataset_generate(preset.as_ptr(), 16, 3, 7, &mut d), PcnStatus::Ok);
        assert_eq!(pcn_dataset_len(d), 3);

        let mut m = ptr::null_mut();
        assert_eq!(pcn_model_init(16, 1, &mut m), PcnStatus::Ok);
        let hu = vec![40.0; 256];
        let mut labels = vec![9u8; 256];
        for fused in [false, true] {
            let s = pcn_model_segment(m, PcnPhase::Venous, fused, hu.as_ptr(), 16, 16, labels.as_mut_ptr());
            assert_eq!(s, PcnStatus::Ok);
            assert!(labels.iter().all(|&l| l < 4));
        }
        let mut score = -1.0;
        assert_eq!(pcn_model_evaluate(m, d, PcnPhase::Arterial, true, 0, &mut score), PcnStatus::Ok);
        assert!((0.0..=1.0).contains(&score));

        pcn_model_free(m);
        pcn_dataset_free(d);
        pcn_dataset_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut d = ptr::null_mut();
        let bad = CString::new("nope").unwrap();
        assert_eq!(pcn_dataset_generate(bad.as_ptr(), 16, 3, 7, &mut d), PcnStatus::InvalidArgument);
        assert!(last_error().contains("nope"));
        assert_eq!(pcn_dataset_generate(ptr::null(), 16, 3, 7, &mut d), PcnStatus::NullPointer);

        let missing = CString::new("/nonexistent/pcn-data").unwrap();
        assert_eq!(pcn_dataset_load(missing.as_ptr(), &mut d), PcnStatus::Prerequisite);
        assert!(d.is_null());

        let mut m = ptr::null_mut();
        assert_eq!(pcn_model_init(16, 1, &mut m), PcnStatus::Ok);
        assert!(pcn_last_error().is_null());
        let hu = vec![0.0; 12];
        let mut out = vec![0u8; 12];
        let s = pcn_model_segment(m, PcnPhase::Arterial, false, hu.as_ptr(), 3, 4, out.as_mut_ptr());
        assert_eq!(s, PcnStatus::InvalidArgument);
        pcn_model_free(m);

        let mut v = 0.0;
        assert_eq!(pcn_model_evaluate(ptr::null(), ptr::null(), PcnPhase::Arterial, false, 1, &mut v), PcnStatus::NullPointer);
    }
}

#[test]
fn dsc_matches_counting() {
    let a = [1u8, 1, 0, 2, 1];
    let b = [1u8, 0, 0, 2, 1];
    let mut v = 0.0;
    unsafe {
        assert_eq!(pcn_dsc(a.as_ptr(), b.as_ptr(), a.len(), 1, &mut v), PcnStatus::Ok);
    }
    assert!((v - 0.8).abs() < 1e-12);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(pcn_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn header() -> PathBuf {
    Path::new(env!("OUT_DIR")).join("pcn.h")
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(header()).unwrap();
    for name in [
        "pcn_last_error",
        "pcn_dataset_generate",
        "pcn_dataset_free",
        "pcn_model_load",
        "pcn_model_segment",
        "pcn_model_evaluate",
        "pcn_dsc",
        "typedef struct PcnModel PcnModel",
        "PCN_STATUS_PREREQUISITE = 6",
    ] {
        assert!(h.contains(name), "{name} missing from header");
    }
    let copy = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/pcn.h");
    assert_eq!(std::fs::read_to_string(copy).unwrap(), h);
}

/// Compiles a C translation unit against the header when a C compiler exists.
#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "pcn.h"
int check(void) {
    PcnModel *m = 0;
    PcnStatus s = pcn_model_init(32, 1, &m);
    unsigned char labels[4];
    double hu[4] = {0};
    if (s == PCN_STATUS_OK) s = pcn_model_segment(m, PCN_PHASE_VENOUS, true, hu, 2, 2, labels);
    pcn_model_free(m);
    return (int)s;
}
"#,
    )
    .unwrap();
    let st = Command::new(cc)
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&src)
        .status()
        .unwrap();
    assert!(st.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
