//! C ABI over `mdts-core`: load a checkpoint, forecast, read variate
//! embeddings, and compute NCC.
//!
//! Every fallible function returns an [`MdtsStatus`]; on failure the message
//! is available from [`mdts_last_error_message`] on the same thread. Arrays
//! are row-major `double` buffers owned by the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mdts_core::checkpoint::load_checkpoint;
use mdts_core::finetune::forecast;
use mdts_core::losses::ncc;
use mdts_core::model::Model;
use mdts_core::{Error, Matrix};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MdtsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Corrupted = 4,
    VersionMismatch = 5,
    UnknownDomain = 6,
    Shape = 7,
    BufferTooSmall = 8,
    Internal = 9,
}

/// Opaque model handle.
pub struct MdtsModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).expect("no interior nul"));
}

fn status_of(e: &Error) -> MdtsStatus {
    match e {
        Error::Io { .. } => MdtsStatus::Io,
        Error::Corrupted(_) => MdtsStatus::Corrupted,
        Error::VersionMismatch { .. } => MdtsStatus::VersionMismatch,
        Error::UnknownDomain(_) => MdtsStatus::UnknownDomain,
        Error::Shape(_) | Error::VariateIndex { .. } => MdtsStatus::Shape,
        _ => MdtsStatus::InvalidArgument,
    }
}

struct Failure(MdtsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MdtsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MdtsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MdtsStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MdtsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(MdtsStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_arg<'a>(p: *const MdtsModel) -> Result<&'a Model, Failure> {
    p.as_ref().map(|m| &m.model).ok_or_else(|| null("model"))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Loads a checkpoint file into a new handle written to `*out`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mdts_model_load(path: *const c_char, out: *mut *mut MdtsModel) -> MdtsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let ckpt = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(MdtsModel { model: ckpt.model }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from [`mdts_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mdts_model_free(model: *mut MdtsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of variates registered for `domain`.
///
/// # Safety
/// Pointers must be valid; `domain` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn mdts_model_variate_count(
    model: *const MdtsModel,
    domain: *const c_char,
    out: *mut usize,
) -> MdtsStatus {
    guard(|| {
        let m = model_arg(model)?;
        let d = str_arg(domain, "domain")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.variate_embeddings(d)?.rows();
        Ok(())
    })
}

/// Encoder width `D`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mdts_model_embedding_dim(model: *const MdtsModel, out: *mut usize) -> MdtsStatus {
    guard(|| {
        let m = model_arg(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.config.encoder.dim;
        Ok(())
    })
}

/// Copies the `V × D` variate-embedding table of `domain` into `out`,
/// which must hold `capacity ≥ V·D` values.
///
/// # Safety
/// `out` must point to `capacity` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mdts_model_variate_embeddings(
    model: *const MdtsModel,
    domain: *const c_char,
    out: *mut f64,
    capacity: usize,
) -> MdtsStatus {
    guard(|| {
        let m = model_arg(model)?;
        let d = str_arg(domain, "domain")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let table = m.variate_embeddings(d)?;
        if capacity < table.len() {
            return Err(Failure(
                MdtsStatus::BufferTooSmall,
                format!("need {} values, buffer holds {capacity}", table.len()),
            ));
        }
        std::ptr::copy_nonoverlapping(table.as_slice().as_ptr(), out, table.len());
        Ok(())
    })
}

/// Forecasts `horizon` points for a `variates × context_len` context of
/// `domain` (rows are catalogue variates `0..variates`). Writes
/// `variates × horizon` values to `out`. `context_len` must be a multiple
/// of the patch size.
///
/// # Safety
/// `context` must hold `variates·context_len` doubles and `out`
/// `variates·horizon` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mdts_model_forecast(
    model: *const MdtsModel,
    domain: *const c_char,
    variates: usize,
    context_len: usize,
    context: *const f64,
    horizon: usize,
    out: *mut f64,
) -> MdtsStatus {
    guard(|| {
        let m = model_arg(model)?;
        let d = str_arg(domain, "domain")?;
        if variates == 0 || context_len == 0 {
            return Err(Failure(MdtsStatus::InvalidArgument, "empty context".into()));
        }
        let ctx = slice_arg(context, variates * context_len, "context")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let subset: Vec<usize> = (0..variates).collect();
        let values = Matrix::from_vec(variates, context_len, ctx.to_vec());
        let pred = forecast(m, &values, d, &subset, horizon)?;
        std::ptr::copy_nonoverlapping(pred.as_slice().as_ptr(), out, pred.len());
        Ok(())
    })
}

/// Mean per-variate Pearson correlation of two `variates × length` arrays.
///
/// # Safety
/// `target` and `prediction` must hold `variates·length` doubles.
#[no_mangle]
pub unsafe extern "C" fn mdts_ncc(
    target: *const f64,
    prediction: *const f64,
    variates: usize,
    length: usize,
    out: *mut f64,
) -> MdtsStatus {
    guard(|| {
        let n = variates * length;
        if n == 0 {
            return Err(Failure(MdtsStatus::InvalidArgument, "empty input".into()));
        }
        let t = slice_arg(target, n, "target")?;
        let p = slice_arg(prediction, n, "prediction")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let t = Matrix::from_vec(variates, length, t.to_vec());
        let p = Matrix::from_vec(variates, length, p.to_vec());
        *out = ncc(&t, &p, &vec![true; n])?;
        Ok(())
    })
}

/// Message of the last failed call on this thread (empty after success).
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mdts_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn mdts_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
