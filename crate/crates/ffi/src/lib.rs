//! C interface to psbounds.
//!
//! Frames and reports are opaque handles owned by the caller and released
//! with their `_free` function. Every fallible call returns a [`PsbStatus`];
//! on failure [`psb_last_error`] describes the most recent error on the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use psbounds::bounds::{worst_case_bounds, BoundsEstimate, OutcomeRange, RangePolicy};
use psbounds::data::{load_frame, FrameSchema, StudyFrame};
use psbounds::report::{analyze, overlap_report, to_json, AnalysisOptions, AnalysisReport};
use psbounds::stratification::StrataRule;
use psbounds::Error;

/// Status codes. The first four match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsbStatus {
    Ok = 0,
    Invalid = 1,
    Separation = 2,
    UnsatisfiableStrata = 3,
    NullPointer = 4,
    InvalidUtf8 = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsbPolicy {
    Global = 0,
    StratumEmpirical = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PsbInterval {
    pub lower: f64,
    pub upper: f64,
    pub width: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PsbOverlap {
    pub omega: f64,
    pub lo: f64,
    pub hi: f64,
    pub inside: usize,
    pub total: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsbAnalysisOptions {
    pub range_lo: f64,
    pub range_hi: f64,
    pub k_max: usize,
    pub min_treated: usize,
    pub min_control: usize,
    pub policy: PsbPolicy,
    pub ridge: bool,
}

/// A loaded study frame.
pub struct PsbFrame(StudyFrame);

/// The result of [`psb_analyze`].
pub struct PsbReport(AnalysisReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let message = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(message));
}

fn fail(status: PsbStatus, message: impl Into<String>) -> PsbStatus {
    set_last_error(message.into());
    status
}

fn from_error(err: Error) -> PsbStatus {
    let status = match err.exit_code() {
        2 => PsbStatus::Separation,
        3 => PsbStatus::UnsatisfiableStrata,
        _ => PsbStatus::Invalid,
    };
    fail(status, err.to_string())
}

fn guard(body: impl FnOnce() -> PsbStatus) -> PsbStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(PsbStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, PsbStatus> {
    if ptr.is_null() {
        return Err(fail(PsbStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(PsbStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn interval(b: &BoundsEstimate) -> PsbInterval {
    PsbInterval {
        lower: b.lower,
        upper: b.upper,
        width: b.width,
    }
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn psb_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |m| m.as_ptr()))
}

/// Worst-case bounds from a SATE estimate, sample size `n`, population size
/// `population` and the outcome range.
///
/// # Safety
/// `out` must point to writable memory for one `PsbInterval`.
#[no_mangle]
pub unsafe extern "C" fn psb_worst_case_bounds(
    sate: f64,
    n: usize,
    population: usize,
    range_lo: f64,
    range_hi: f64,
    out: *mut PsbInterval,
) -> PsbStatus {
    guard(|| {
        if out.is_null() {
            return fail(PsbStatus::NullPointer, "out is null");
        }
        let result = OutcomeRange::new(range_lo, range_hi).and_then(|r| worst_case_bounds(sate, n, population, r));
        match result {
            Ok(b) => {
                *out = interval(&b);
                PsbStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Loads a CSV study frame with columns `id, z, w, y` and covariates.
/// `covariates` is a comma-separated column list, or null for every other
/// column.
///
/// # Safety
/// `path` and a non-null `covariates` must be nul-terminated strings; `out`
/// must be writable. On success `*out` owns a frame to release with
/// [`psb_frame_free`].
#[no_mangle]
pub unsafe extern "C" fn psb_frame_load_csv(
    path: *const c_char,
    covariates: *const c_char,
    out: *mut *mut PsbFrame,
) -> PsbStatus {
    guard(|| {
        if out.is_null() {
            return fail(PsbStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        let schema = if covariates.is_null() {
            FrameSchema::default()
        } else {
            match str_arg(covariates, "covariates") {
                Ok(list) => FrameSchema::with_covariates(
                    list.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect(),
                ),
                Err(status) => return status,
            }
        };
        match load_frame(path, &schema) {
            Ok(frame) => {
                *out = Box::into_raw(Box::new(PsbFrame(frame)));
                PsbStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Population size `N`, or 0 for a null frame.
///
/// # Safety
/// `frame` must be null or a live handle from [`psb_frame_load_csv`].
#[no_mangle]
pub unsafe extern "C" fn psb_frame_population_size(frame: *const PsbFrame) -> usize {
    frame.as_ref().map_or(0, |f| f.0.population_size())
}

/// Sample size `n`, or 0 for a null frame.
///
/// # Safety
/// `frame` must be null or a live handle from [`psb_frame_load_csv`].
#[no_mangle]
pub unsafe extern "C" fn psb_frame_sample_size(frame: *const PsbFrame) -> usize {
    frame.as_ref().map_or(0, |f| f.0.n())
}

/// # Safety
/// `frame` must be null or a handle from [`psb_frame_load_csv`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn psb_frame_free(frame: *mut PsbFrame) {
    if !frame.is_null() {
        drop(Box::from_raw(frame));
    }
}

/// Options matching the command-line defaults for the given range.
#[no_mangle]
pub extern "C" fn psb_analysis_options_default(range_lo: f64, range_hi: f64) -> PsbAnalysisOptions {
    let rule = StrataRule::default();
    PsbAnalysisOptions {
        range_lo,
        range_hi,
        k_max: rule.k_max,
        min_treated: rule.min_treated,
        min_control: rule.min_control,
        policy: PsbPolicy::StratumEmpirical,
        ridge: false,
    }
}

/// Fits the propensity model and computes unstratified and stratified
/// bounds.
///
/// # Safety
/// `frame` must be a live handle, `options` readable and `out` writable. On
/// success `*out` owns a report to release with [`psb_report_free`].
#[no_mangle]
pub unsafe extern "C" fn psb_analyze(
    frame: *const PsbFrame,
    options: *const PsbAnalysisOptions,
    out: *mut *mut PsbReport,
) -> PsbStatus {
    guard(|| {
        if out.is_null() {
            return fail(PsbStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let (Some(frame), Some(options)) = (frame.as_ref(), options.as_ref()) else {
            return fail(PsbStatus::NullPointer, "frame or options is null");
        };
        let range = match OutcomeRange::new(options.range_lo, options.range_hi) {
            Ok(r) => r,
            Err(e) => return from_error(e),
        };
        let opts = AnalysisOptions {
            range,
            rule: StrataRule {
                k_max: options.k_max,
                min_treated: options.min_treated,
                min_control: options.min_control,
            },
            policy: match options.policy {
                PsbPolicy::Global => RangePolicy::Global,
                PsbPolicy::StratumEmpirical => RangePolicy::StratumEmpirical,
            },
            ridge: options.ridge,
        };
        match analyze(&frame.0, &opts) {
            Ok(report) => {
                *out = Box::into_raw(Box::new(PsbReport(report)));
                PsbStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Copies the unstratified and stratified intervals out of a report.
/// Either destination may be null.
///
/// # Safety
/// `report` must be a live handle; non-null destinations must be writable.
#[no_mangle]
pub unsafe extern "C" fn psb_report_bounds(
    report: *const PsbReport,
    unstratified: *mut PsbInterval,
    stratified: *mut PsbInterval,
) -> PsbStatus {
    let Some(report) = report.as_ref() else {
        return fail(PsbStatus::NullPointer, "report is null");
    };
    if let Some(u) = unstratified.as_mut() {
        *u = interval(&report.0.unstratified);
    }
    if let Some(s) = stratified.as_mut() {
        *s = interval(&report.0.stratified);
    }
    PsbStatus::Ok
}

/// Precision gain, or NaN for a null report.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn psb_report_precision_gain(report: *const PsbReport) -> f64 {
    report.as_ref().map_or(f64::NAN, |r| r.0.precision_gain)
}

/// Number of strata used, or 0 for a null report.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn psb_report_strata(report: *const PsbReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.k)
}

/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn psb_report_overlap(report: *const PsbReport, out: *mut PsbOverlap) -> PsbStatus {
    let (Some(report), Some(out)) = (report.as_ref(), out.as_mut()) else {
        return fail(PsbStatus::NullPointer, "report or out is null");
    };
    let o = &report.0.overlap;
    *out = PsbOverlap {
        omega: o.omega,
        lo: o.lo,
        hi: o.hi,
        inside: o.n_pop_inside,
        total: o.n_pop_total,
    };
    PsbStatus::Ok
}

/// The full report as JSON, or null for a null report. Release with
/// [`psb_string_free`].
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn psb_report_to_json(report: *const PsbReport) -> *mut c_char {
    let Some(report) = report.as_ref() else {
        set_last_error("report is null".into());
        return ptr::null_mut();
    };
    match to_json(&report.0) {
        Ok(json) => CString::new(json).map_or(ptr::null_mut(), CString::into_raw),
        Err(e) => {
            set_last_error(e.to_string());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `report` must be null or a handle from [`psb_analyze`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn psb_report_free(report: *mut PsbReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Overlap of sample and population propensity scores for a frame.
///
/// # Safety
/// `frame` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn psb_overlap(frame: *const PsbFrame, ridge: bool, out: *mut PsbOverlap) -> PsbStatus {
    guard(|| {
        let (Some(frame), Some(out)) = (frame.as_ref(), out.as_mut()) else {
            return fail(PsbStatus::NullPointer, "frame or out is null");
        };
        match overlap_report(&frame.0, ridge) {
            Ok(o) => {
                *out = PsbOverlap {
                    omega: o.omega,
                    lo: o.lo,
                    hi: o.hi,
                    inside: o.n_pop_inside,
                    total: o.n_pop_total,
                };
                PsbStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `s` must be null or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn psb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
