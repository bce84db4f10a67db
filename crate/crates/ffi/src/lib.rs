//! C ABI over saved imputation checkpoints.
//!
//! Handles are opaque and owned by the caller; release them with
//! `dagi_model_free`. Every fallible call returns a `DagiStatus`; on failure
//! `dagi_last_error` describes the most recent error on the calling thread.
//! Matrices are row-major `double` arrays: shared blocks are `v x p`,
//! imputed blocks `v x q`, in the checkpoint's ROI and measurement order.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dagi::eval::LoadedModel;
use dagi::math::Matrix;
use dagi::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DagiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Schema = 5,
    Unsupported = 6,
    BufferTooSmall = 7,
    Runtime = 8,
    Panic = 9,
}

/// A loaded checkpoint of any method.
pub struct DagiModel {
    inner: LoadedModel,
    roi_names: Vec<CString>,
    measurement_names: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> DagiStatus {
    match err {
        Error::Io { .. } => DagiStatus::Io,
        Error::Checkpoint(_) | Error::CheckpointVersion { .. } | Error::Json(_) => {
            DagiStatus::Checkpoint
        }
        Error::Schema(_) | Error::Dimension { .. } => DagiStatus::Schema,
        Error::Contract(_) => DagiStatus::Unsupported,
        Error::Config(_) | Error::Empty(_) => DagiStatus::InvalidArgument,
        _ => DagiStatus::Runtime,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (DagiStatus, String)>) -> DagiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DagiStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DagiStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (DagiStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DagiStatus, String) {
    (DagiStatus::NullPointer, format!("{what} is null"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dagi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dagi_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint written by `dagi train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dagi_model_load(
    path: *const c_char,
    out: *mut *mut DagiModel,
) -> DagiStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (DagiStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let inner = LoadedModel::load(Path::new(path)).map_err(lib_err)?;
        let cstrings = |v: &[String]| {
            v.iter()
                .map(|s| CString::new(s.as_str()).unwrap_or_default())
                .collect::<Vec<_>>()
        };
        let schema = inner.schema();
        let model = DagiModel {
            roi_names: cstrings(&schema.roi_names),
            measurement_names: cstrings(&schema.target),
            inner,
        };
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from `dagi_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dagi_model_free(model: *mut DagiModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// ROI count `v`, shared measurement count `p`, target count `q`. Any
/// output pointer may be null.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dagi_model_dims(
    model: *const DagiModel,
    v: *mut usize,
    p: *mut usize,
    q: *mut usize,
) -> DagiStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let s = m.inner.schema();
        for (ptr, val) in [
            (v, s.roi_names.len()),
            (p, s.shared.len()),
            (q, s.target.len()),
        ] {
            if !ptr.is_null() {
                *ptr = val;
            }
        }
        Ok(())
    })
}

/// Name of ROI `index`, or null when out of range. Owned by the handle.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dagi_model_roi_name(
    model: *const DagiModel,
    index: usize,
) -> *const c_char {
    model
        .as_ref()
        .and_then(|m| m.roi_names.get(index))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Name of target measurement `index`, or null when out of range.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dagi_model_target_name(
    model: *const DagiModel,
    index: usize,
) -> *const c_char {
    model
        .as_ref()
        .and_then(|m| m.measurement_names.get(index))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// 1 if the model carries a trained label classifier, else 0.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dagi_model_has_classifier(model: *const DagiModel) -> i32 {
    match model.as_ref().map(|m| &m.inner) {
        Some(LoadedModel::Graph(g)) => i32::from(g.classifier_enabled()),
        _ => 0,
    }
}

unsafe fn read_shared(
    m: &DagiModel,
    shared: *const f64,
    len: usize,
) -> Result<Matrix, (DagiStatus, String)> {
    if shared.is_null() {
        return Err(null("shared"));
    }
    let s = m.inner.schema();
    let (v, p) = (s.roi_names.len(), s.shared.len());
    if len != v * p {
        return Err((
            DagiStatus::InvalidArgument,
            format!(
                "shared block has {len} values, expected {v} x {p} = {}",
                v * p
            ),
        ));
    }
    let values = std::slice::from_raw_parts(shared, len).to_vec();
    Matrix::from_vec(v, p, values).map_err(lib_err)
}

/// Imputes one subject. `shared` holds `v * p` values; `out` receives
/// `v * q` values and must have room for `out_len >= v * q`.
///
/// # Safety
/// `model` must be a live handle; the buffers must be valid for the given
/// lengths.
#[no_mangle]
pub unsafe extern "C" fn dagi_model_impute(
    model: *const DagiModel,
    shared: *const f64,
    shared_len: usize,
    out: *mut f64,
    out_len: usize,
) -> DagiStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let x = read_shared(m, shared, shared_len)?;
        let s = m.inner.schema();
        let need = s.roi_names.len() * s.target.len();
        if out_len < need {
            return Err((
                DagiStatus::BufferTooSmall,
                format!("output buffer holds {out_len} values, need {need}"),
            ));
        }
        let y = m.inner.imputer().predict(&x).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(y.as_slice());
        Ok(())
    })
}

/// Probability of label 1 for one subject; models without a classifier
/// return `Unsupported`.
///
/// # Safety
/// `model` must be a live handle; `shared` must hold `shared_len` values and
/// `prob` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dagi_model_label_probability(
    model: *const DagiModel,
    shared: *const f64,
    shared_len: usize,
    prob: *mut f64,
) -> DagiStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if prob.is_null() {
            return Err(null("prob"));
        }
        let LoadedModel::Graph(g) = &m.inner else {
            return Err((
                DagiStatus::Unsupported,
                "this checkpoint has no label classifier".into(),
            ));
        };
        let x = read_shared(m, shared, shared_len)?;
        *prob = g.sex_probability(&x).map_err(lib_err)?;
        Ok(())
    })
}
