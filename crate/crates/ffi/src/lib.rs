//! C ABI over the `pcn` library.
//!
//! Datasets and trained bundles are passed around as opaque handles. Every
//! fallible function returns a [`PcnStatus`]; on failure the message is kept
//! per thread and can be read with [`pcn_last_error`]. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use pcn::checkpoint::load_bundle;
use pcn::config::PhantomPreset;
use pcn::eval::{evaluate, predict_fused, Branches, EvalOptions, METHOD_FUSED, METHOD_SINGLE};
use pcn::io::load_dataset;
use pcn::objective::ModelBundle;
use pcn::phantom::generate_dataset;
use pcn::seg::seg_forward;
use pcn::{dsc, BinaryMask, Dataset, LabelPhase, PcnError, PhaseTag, Volume};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Validation = 3,
    Io = 4,
    Format = 5,
    Prerequisite = 6,
    Runtime = 7,
    Panic = 8,
}

/// Acquisition phase.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcnPhase {
    Arterial = 0,
    Venous = 1,
}

impl From<PcnPhase> for PhaseTag {
    fn from(p: PcnPhase) -> Self {
        match p {
            PcnPhase::Arterial => PhaseTag::Arterial,
            PcnPhase::Venous => PhaseTag::Venous,
        }
    }
}

/// Opaque dataset handle.
pub struct PcnDataset {
    inner: Dataset,
}

/// Opaque handle to a trained model bundle.
pub struct PcnModel {
    inner: ModelBundle,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &PcnError) -> PcnStatus {
    match e {
        PcnError::Validation(_) | PcnError::Config(_) => PcnStatus::Validation,
        PcnError::InvalidRange { .. } | PcnError::OutOfBounds { .. } | PcnError::ShapeMismatch(_) | PcnError::PhaseMismatch { .. } => {
            PcnStatus::InvalidArgument
        }
        PcnError::Io(_) => PcnStatus::Io,
        PcnError::Format { .. } | PcnError::Checksum { .. } | PcnError::Json(_) => PcnStatus::Format,
        PcnError::Prerequisite(_) | PcnError::Locked(_) => PcnStatus::Prerequisite,
        _ => PcnStatus::Runtime,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Pcn(PcnError),
}

impl From<PcnError> for Fail {
    fn from(e: PcnError) -> Self {
        Fail::Pcn(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PcnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PcnStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            PcnStatus::NullPointer
        }
        Ok(Err(Fail::Arg(m))) => {
            set_error(m);
            PcnStatus::InvalidArgument
        }
        Ok(Err(Fail::Pcn(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            PcnStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pcn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pcn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates a phantom dataset from a preset name (`default`, `weak_arterial`,
/// `weak_venous`, `abnormal`) on a `side` x `side` grid.
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pcn_dataset_generate(
    preset: *const c_char,
    side: usize,
    cases: usize,
    seed: u64,
    out: *mut *mut PcnDataset,
) -> PcnStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let name = str_arg(preset, "preset")?;
        let p = PhantomPreset::parse(name).ok_or_else(|| Fail::Arg(format!("unknown preset {name:?}")))?;
        let d = generate_dataset(&p.config().with_grid(side), cases, seed)?;
        *out = Box::into_raw(Box::new(PcnDataset { inner: d }));
        Ok(())
    })
}

/// Loads a dataset directory written by `pcn phantom-gen`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pcn_dataset_load(dir: *const c_char, out: *mut *mut PcnDataset) -> PcnStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let (d, _) = load_dataset(&PathBuf::from(str_arg(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(PcnDataset { inner: d }));
        Ok(())
    })
}

/// Number of cases; 0 for a null handle.
///
/// # Safety
/// `d` must be null or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn pcn_dataset_len(d: *const PcnDataset) -> usize {
    d.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `d` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pcn_dataset_free(d: *mut PcnDataset) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Loads a bundle checkpoint (`model.ckpt` of a training run).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pcn_model_load(path: *const c_char, out: *mut *mut PcnModel) -> PcnStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let (b, _) = load_bundle(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(PcnModel { inner: b }));
        Ok(())
    })
}

/// A freshly initialized, untrained bundle for a `side` x `side` grid with
/// the default architecture.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pcn_model_init(side: usize, seed: u64, out: *mut *mut PcnModel) -> PcnStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let b = ModelBundle::init(Default::default(), (side, side), seed)?;
        *out = Box::into_raw(Box::new(PcnModel { inner: b }));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pcn_model_free(m: *mut PcnModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Segments one `height` x `width` image given in HU, row-major, into
/// `labels` (same length). With `fused` nonzero the translated branch is
/// averaged in with weight 0.5.
///
/// # Safety
/// `hu` must point to `height * width` doubles and `labels` to as many bytes.
#[no_mangle]
pub unsafe extern "C" fn pcn_model_segment(
    m: *const PcnModel,
    phase: PcnPhase,
    fused: bool,
    hu: *const f64,
    height: usize,
    width: usize,
    labels: *mut u8,
) -> PcnStatus {
    guard(|| {
        let m = handle(m, "model")?;
        if hu.is_null() {
            return Err(Fail::Null("hu"));
        }
        if labels.is_null() {
            return Err(Fail::Null("labels"));
        }
        let n = height
            .checked_mul(width)
            .ok_or_else(|| Fail::Arg("height * width overflows".into()))?;
        let p: PhaseTag = phase.into();
        let v = Volume::new(height, width, std::slice::from_raw_parts(hu, n).to_vec(), p, "ffi")?;
        let b = &m.inner;
        let mask = if fused {
            predict_fused(b.seg(p), b.seg(p.other()), b.gen(p), &v, 0.5)?.1
        } else {
            seg_forward(b.seg(p), &v)?.argmax(LabelPhase::from(p))
        };
        std::slice::from_raw_parts_mut(labels, n).copy_from_slice(&mask.data);
        Ok(())
    })
}

/// Average DSC of `model` on `data` for one phase. `class` 0 selects the mean
/// over foreground classes.
///
/// # Safety
/// Handles must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pcn_model_evaluate(
    m: *const PcnModel,
    d: *const PcnDataset,
    phase: PcnPhase,
    fused: bool,
    class: u32,
    out: *mut f64,
) -> PcnStatus {
    guard(|| {
        let m = handle(m, "model")?;
        let d = handle(d, "dataset")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let p: PhaseTag = phase.into();
        let br = if fused {
            Branches::from_bundle(&m.inner, p)
        } else {
            Branches::single(m.inner.seg(p))
        };
        let r = evaluate(br, &d.inner, p, &EvalOptions::default())?;
        let key = if class == 0 { "mean".to_string() } else { class.to_string() };
        let method = if fused { METHOD_FUSED } else { METHOD_SINGLE };
        let row = r
            .row(method, p, &key)
            .ok_or_else(|| Fail::Arg(format!("no score for class {class}")))?;
        *out = row.average;
        Ok(())
    })
}

/// DSC of class `class` between two label arrays of length `len`.
///
/// # Safety
/// `a` and `b` must point to `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pcn_dsc(a: *const u8, b: *const u8, len: usize, class: u8, out: *mut f64) -> PcnStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(Fail::Null("mask"));
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let bin = |p: *const u8| BinaryMask {
            height: 1,
            width: len,
            data: std::slice::from_raw_parts(p, len).iter().map(|&v| v == class).collect(),
        };
        *out = dsc(&bin(a), &bin(b))?;
        Ok(())
    })
}
