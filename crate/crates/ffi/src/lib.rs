//! C ABI for the `otke` library.
//!
//! Models are opaque handles loaded from checkpoint files. Every fallible
//! call returns an [`OtkeStatus`]; on failure a message describing the error
//! is available from [`otke_last_error`] on the same thread. Matrices cross
//! the boundary as row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ndarray::{Array1, ArrayView2};
use otke::embed::embed_set;
use otke::ot::{sinkhorn, CostContext, SinkhornMode};
use otke::train::{read_checkpoint, Model};
use otke::Error;

/// Result codes. Non-zero values match the exit codes of the `otke` binary.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OtkeStatus {
    Ok = 0,
    /// Null pointer, bad parameter value or undersized output buffer.
    InvalidArgument = 2,
    /// File could not be read or is not a valid checkpoint.
    Io = 3,
    /// A NaN or infinity appeared during the computation.
    NonFinite = 4,
    /// Input dimensions disagree with the model or with each other.
    Shape = 5,
    /// Input exceeds a size limit.
    TooLarge = 6,
    /// The library panicked. This is a bug.
    Internal = 7,
}

/// Arithmetic used by [`otke_sinkhorn`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OtkeSinkhornMode {
    LogDomain = 0,
    Standard = 1,
}

/// A trained model: Nyström map, references and linear classifier.
pub struct OtkeModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> OtkeStatus {
    match err {
        Error::Io(_) | Error::Parse { .. } | Error::Checkpoint(_) | Error::EmptySample { .. } => OtkeStatus::Io,
        Error::UnknownToken { .. } | Error::SequenceTooShort { .. } => OtkeStatus::Io,
        Error::NonFinite(_) => OtkeStatus::NonFinite,
        Error::DimensionMismatch(_) | Error::InconsistentDimension { .. } => OtkeStatus::Shape,
        Error::TooLarge { .. } => OtkeStatus::TooLarge,
        Error::InvalidParameter(_) | Error::InsufficientData(_) | Error::EmptySet | Error::EmptyDataset => {
            OtkeStatus::InvalidArgument
        }
    }
}

/// Runs `f`, records any error or panic, and converts to a status code.
fn guard(f: impl FnOnce() -> Result<(), (OtkeStatus, String)>) -> OtkeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OtkeStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            OtkeStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (OtkeStatus, String) {
    (status_of(&e), e.to_string())
}

fn invalid(msg: &str) -> (OtkeStatus, String) {
    (OtkeStatus::InvalidArgument, msg.to_string())
}

/// # Safety
/// `data` must be null or point to `rows * cols` readable doubles.
unsafe fn matrix<'a>(data: *const f64, rows: usize, cols: usize) -> Result<ArrayView2<'a, f64>, (OtkeStatus, String)> {
    if data.is_null() {
        return Err(invalid("null input matrix"));
    }
    let len = rows.checked_mul(cols).ok_or_else(|| invalid("matrix size overflows"))?;
    let slice = std::slice::from_raw_parts(data, len);
    ArrayView2::from_shape((rows, cols), slice).map_err(|e| invalid(&e.to_string()))
}

/// # Safety
/// `out` must be null or point to `len` writable doubles.
unsafe fn output<'a>(out: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], (OtkeStatus, String)> {
    if out.is_null() {
        return Err(invalid("null output buffer"));
    }
    if len < need {
        return Err(invalid(&format!("output buffer holds {len} values, {need} required")));
    }
    Ok(std::slice::from_raw_parts_mut(out, need))
}

/// Message for the last failed call on this thread, or NULL if it succeeded.
///
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn otke_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn otke_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `otke fit`.
///
/// On success `*out` receives a handle that must be released with
/// [`otke_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn otke_model_load(path: *const c_char, out: *mut *mut OtkeModel) -> OtkeStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(invalid("null argument"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
        let model = read_checkpoint(path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(OtkeModel { model }));
        Ok(())
    })
}

/// Releases a model. Passing NULL is a no-op.
///
/// # Safety
/// `model` must come from [`otke_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn otke_model_free(model: *mut OtkeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature width `d` expected by the model, 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn otke_model_input_dim(model: *const OtkeModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.input_dim())
}

/// Length `q·p·k` of one embedding, 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn otke_model_embedding_dim(model: *const OtkeModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.bank.output_dim())
}

/// Number of classifier outputs, 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn otke_model_num_classes(model: *const OtkeModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.classifier.num_classes())
}

/// # Safety
/// `features` must be null or hold `n * d` doubles.
unsafe fn embed_one(
    handle: &OtkeModel,
    features: *const f64,
    n: usize,
    d: usize,
) -> Result<Array1<f64>, (OtkeStatus, String)> {
    if n == 0 {
        return Err(lib_err(Error::EmptySet));
    }
    let x = matrix(features, n, d)?;
    let m = &handle.model;
    if d != m.input_dim() {
        return Err(lib_err(Error::DimensionMismatch(format!("model expects {}-d features, got {d}", m.input_dim()))));
    }
    let psi = m.nystrom.embed(x).map_err(lib_err)?;
    let phi = embed_set(psi.view(), &m.bank).map_err(lib_err)?.flatten();
    Ok(phi)
}

/// Embeds one set of `n` feature vectors of width `d` (row-major `n × d`).
///
/// Writes [`otke_model_embedding_dim`] values to `out`; `out_len` is the
/// capacity of `out`.
///
/// # Safety
/// `model` must be a live handle, `features` must hold `n * d` doubles and
/// `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn otke_model_embed(
    model: *const OtkeModel,
    features: *const f64,
    n: usize,
    d: usize,
    out: *mut f64,
    out_len: usize,
) -> OtkeStatus {
    guard(|| {
        let handle = model.as_ref().ok_or_else(|| invalid("null model"))?;
        let phi = embed_one(handle, features, n, d)?;
        output(out, out_len, phi.len())?.copy_from_slice(phi.as_slice().unwrap());
        Ok(())
    })
}

/// Classifier scores (logits) for one set, [`otke_model_num_classes`] values.
///
/// # Safety
/// Same contract as [`otke_model_embed`].
#[no_mangle]
pub unsafe extern "C" fn otke_model_scores(
    model: *const OtkeModel,
    features: *const f64,
    n: usize,
    d: usize,
    out: *mut f64,
    out_len: usize,
) -> OtkeStatus {
    guard(|| {
        let handle = model.as_ref().ok_or_else(|| invalid("null model"))?;
        let phi = embed_one(handle, features, n, d)?;
        let logits = handle.model.classifier.logits(phi.view());
        output(out, out_len, logits.len())?.copy_from_slice(logits.as_slice().unwrap());
        Ok(())
    })
}

/// Entropic transport plan between `n` uniform input points and `p` uniform
/// reference points, given their `n × p` similarity matrix.
///
/// Runs exactly `iters` Sinkhorn iterations and writes the `n × p` plan
/// row-major to `plan`.
///
/// # Safety
/// `similarity` and `plan` must each hold `n * p` doubles.
#[no_mangle]
pub unsafe extern "C" fn otke_sinkhorn(
    similarity: *const f64,
    n: usize,
    p: usize,
    epsilon: f64,
    iters: usize,
    mode: OtkeSinkhornMode,
    plan: *mut f64,
) -> OtkeStatus {
    guard(|| {
        if n == 0 || p == 0 {
            return Err(lib_err(Error::EmptySet));
        }
        let k = matrix(similarity, n, p)?;
        let ctx = CostContext::uniform(k, epsilon).map_err(lib_err)?;
        let mode = match mode {
            OtkeSinkhornMode::LogDomain => SinkhornMode::LogDomain,
            OtkeSinkhornMode::Standard => SinkhornMode::Standard,
        };
        let solved = sinkhorn(&ctx, iters, mode).map_err(lib_err)?;
        let out = output(plan, n * p, n * p)?;
        for (o, v) in out.iter_mut().zip(solved.plan.iter()) {
            *o = *v;
        }
        Ok(())
    })
}
