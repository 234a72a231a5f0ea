use std::ffi::{CStr, CString};
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::ptr;

use psbounds_ffi::*;

fn fixture(dir: &Path) -> CString {
    let path = dir.join("study.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "id,z,w,y,x1").unwrap();
    let rows = [
        (1, 1, Some((1, 2.0)), 0.9),
        (2, 1, Some((0, 0.5)), 0.4),
        (3, 1, Some((1, 1.5)), -0.3),
        (4, 1, Some((0, 0.0)), 1.6),
        (5, 0, None, -1.2),
        (6, 0, None, 0.1),
        (7, 0, None, -0.8),
        (8, 0, None, 0.7),
        (9, 0, None, -1.9),
        (10, 0, None, 0.3),
    ];
    for (id, z, wy, x) in rows {
        match wy {
            Some((w, y)) => writeln!(f, "{id},{z},{w},{y},{x}").unwrap(),
            None => writeln!(f, "{id},{z},,,{x}").unwrap(),
        }
    }
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = psb_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

#[test]
fn worst_case_bounds_through_the_abi() {
    let mut out = PsbInterval::default();
    let status = unsafe { psb_worst_case_bounds(0.078, 54, 1514, -1.37, 1.68, &mut out) };
    assert_eq!(status, PsbStatus::Ok);
    assert!((out.lower + 2.93).abs() < 0.01);
    assert!((out.upper - 2.94).abs() < 0.01);
    assert!((out.width - (out.upper - out.lower)).abs() < 1e-12);
}

#[test]
fn invalid_arguments_set_the_last_error() {
    let mut out = PsbInterval::default();
    let status = unsafe { psb_worst_case_bounds(0.1, 0, 10, 0.0, 1.0, &mut out) };
    assert_eq!(status, PsbStatus::Invalid);
    assert!(last_error().contains("n > 0"));

    let status = unsafe { psb_worst_case_bounds(0.1, 5, 10, 0.0, 1.0, ptr::null_mut()) };
    assert_eq!(status, PsbStatus::NullPointer);

    let mut frame = ptr::null_mut();
    let status = unsafe { psb_frame_load_csv(ptr::null(), ptr::null(), &mut frame) };
    assert_eq!(status, PsbStatus::NullPointer);
    assert!(frame.is_null());
}

#[test]
fn load_analyze_and_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = fixture(dir.path());
    let covariates = CString::new("x1").unwrap();
    let mut frame = ptr::null_mut();
    assert_eq!(unsafe { psb_frame_load_csv(path.as_ptr(), covariates.as_ptr(), &mut frame) }, PsbStatus::Ok);
    assert_eq!(unsafe { psb_frame_population_size(frame) }, 10);
    assert_eq!(unsafe { psb_frame_sample_size(frame) }, 4);

    let mut options = psb_analysis_options_default(0.0, 3.0);
    options.k_max = 1;
    options.policy = PsbPolicy::Global;
    let mut report = ptr::null_mut();
    assert_eq!(unsafe { psb_analyze(frame, &options, &mut report) }, PsbStatus::Ok);

    let (mut u, mut s) = (PsbInterval::default(), PsbInterval::default());
    assert_eq!(unsafe { psb_report_bounds(report, &mut u, &mut s) }, PsbStatus::Ok);
    // SATE = (2 + 1.5)/2 - (0.5 + 0)/2 = 1.5, p = 0.4
    assert!((u.lower - (1.5 * 0.4 - 3.0 * 0.6)).abs() < 1e-12);
    assert!((u.upper - (1.5 * 0.4 + 3.0 * 0.6)).abs() < 1e-12);
    assert_eq!(u, s);
    assert_eq!(unsafe { psb_report_strata(report) }, 1);
    assert_eq!(unsafe { psb_report_precision_gain(report) }, 0.0);

    let mut o = PsbOverlap::default();
    assert_eq!(unsafe { psb_report_overlap(report, &mut o) }, PsbStatus::Ok);
    assert_eq!(o.total, 10);
    let mut direct = PsbOverlap::default();
    assert_eq!(unsafe { psb_overlap(frame, false, &mut direct) }, PsbStatus::Ok);
    assert_eq!(o, direct);

    let json = unsafe { psb_report_to_json(report) };
    assert!(!json.is_null());
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_string();
    assert!(text.contains("\"precision_gain\""));
    unsafe {
        psb_string_free(json);
        psb_report_free(report);
        psb_frame_free(frame);
        psb_report_free(ptr::null_mut());
        psb_frame_free(ptr::null_mut());
    }
}

#[test]
fn null_handles_are_tolerated_by_getters() {
    assert_eq!(unsafe { psb_frame_population_size(ptr::null()) }, 0);
    assert!(unsafe { psb_report_precision_gain(ptr::null()) }.is_nan());
    assert!(unsafe { psb_report_to_json(ptr::null()) }.is_null());
}

#[test]
fn missing_covariate_maps_to_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let path = fixture(dir.path());
    let covariates = CString::new("x1,nope").unwrap();
    let mut frame = ptr::null_mut();
    let status = unsafe { psb_frame_load_csv(path.as_ptr(), covariates.as_ptr(), &mut frame) };
    assert_eq!(status, PsbStatus::Invalid);
    assert!(last_error().contains("nope"));
    assert!(frame.is_null());
}

#[test]
fn unsatisfiable_minima_map_to_their_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = fixture(dir.path());
    let mut frame = ptr::null_mut();
    assert_eq!(unsafe { psb_frame_load_csv(path.as_ptr(), ptr::null(), &mut frame) }, PsbStatus::Ok);
    let mut options = psb_analysis_options_default(0.0, 3.0);
    options.min_treated = 5;
    let mut report = ptr::null_mut();
    assert_eq!(unsafe { psb_analyze(frame, &options, &mut report) }, PsbStatus::UnsatisfiableStrata);
    assert!(report.is_null());
    unsafe { psb_frame_free(frame) };
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/psbounds.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for symbol in ["psb_worst_case_bounds", "psb_frame_load_csv", "psb_analyze", "psb_report_free", "PSB_STATUS_SEPARATION"] {
        assert!(text.contains(symbol), "{symbol} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let source = dir.path().join("use.c");
    std::fs::write(
        &source,
        "#include \"psbounds.h\"\n\
         int main(void) {\n\
           PsbInterval b;\n\
           PsbAnalysisOptions o = psb_analysis_options_default(0.0, 1.0);\n\
           PsbStatus s = psb_worst_case_bounds(0.1, 5, 10, 0.0, 1.0, &b);\n\
           return (int)s + (int)o.k_max;\n\
         }\n",
    )
    .unwrap();
    let status = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&source)
        .status();
    match status {
        Ok(s) => assert!(s.success(), "header does not compile"),
        Err(e) => eprintln!("no C compiler available ({e}); symbol check only"),
    }
}
