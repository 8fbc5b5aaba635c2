//! C ABI over the attnback scoring back-ends and metrics.
//!
//! Every fallible function returns an [`AtbStatus`]. On failure the message
//! is kept per thread and can be read with [`atb_last_error`].
//! Models are opaque handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use attnback::baselines::{cosine_score, plda_score_multi, PldaModel, PldaMulti};
use attnback::metrics::{eer, min_dcf, OperatingPoint, ScoreSet};
use attnback::model::{backend_forward, AttentionBackendParams};
use attnback::trainer::load_params_any;
use attnback::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AtbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Degenerate = 4,
    NonFinite = 5,
    InsufficientData = 6,
    Format = 7,
    Parse = 8,
    Io = 9,
    Internal = 10,
}

/// How several enrollment vectors are combined by the PLDA scorer.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AtbPldaMode {
    Mean = 0,
    Concat = 1,
}

/// Trained attention back-end.
pub struct AtbAttentionModel {
    params: AttentionBackendParams,
}

/// Trained PLDA model with its preprocessing.
pub struct AtbPldaModel {
    model: PldaModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> AtbStatus {
    match e {
        Error::Shape { .. } => AtbStatus::Shape,
        Error::InvalidArgument(_) => AtbStatus::InvalidArgument,
        Error::Degenerate(_) => AtbStatus::Degenerate,
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => AtbStatus::NonFinite,
        Error::NonMonotoneLikelihood { .. } => AtbStatus::Internal,
        Error::InsufficientData(_) => AtbStatus::InsufficientData,
        Error::Format { .. } => AtbStatus::Format,
        Error::Parse { .. } => AtbStatus::Parse,
        Error::Io { .. } => AtbStatus::Io,
    }
}

struct Fail(AtbStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(AtbStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AtbStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AtbStatus::Ok,
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".to_string());
            AtbStatus::Internal
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(AtbStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(Path::new(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    unsafe { p.as_mut() }.ok_or_else(|| null(what))
}

/// Row-major `n_enroll x dim` block split into rows.
unsafe fn rows_arg<'a>(
    enroll: *const f64,
    n_enroll: usize,
    dim: usize,
) -> Result<Vec<&'a [f64]>, Fail> {
    if n_enroll == 0 || dim == 0 {
        return Err(Fail(AtbStatus::InvalidArgument, "empty enrollment".into()));
    }
    let total = n_enroll.checked_mul(dim).ok_or_else(|| {
        Fail(
            AtbStatus::InvalidArgument,
            "enrollment size overflows".into(),
        )
    })?;
    Ok(slice_arg(enroll, total, "enroll")?
        .chunks_exact(dim)
        .collect())
}

unsafe fn labeled_arg(
    scores: *const f64,
    is_target: *const u8,
    n: usize,
) -> Result<ScoreSet, Fail> {
    let s = slice_arg(scores, n, "scores")?;
    let t: Vec<bool> = slice_arg(is_target, n, "is_target")?
        .iter()
        .map(|&b| b != 0)
        .collect();
    Ok(ScoreSet::from_labeled(s, &t)?)
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn atb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn atb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an attention back-end from a parameter file or a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn atb_attention_load(
    path: *const c_char,
    out: *mut *mut AtbAttentionModel,
) -> AtbStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let params = load_params_any(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(AtbAttentionModel { params }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`atb_attention_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn atb_attention_free(model: *mut AtbAttentionModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding dimension expected by the model, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn atb_attention_dim(model: *const AtbAttentionModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.config().dim)
}

/// Scores one trial. `enroll` is row-major `n_enroll x dim`, `test` has `dim`
/// values. Writes a probability in (0, 1).
///
/// # Safety
/// All pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn atb_attention_score(
    model: *const AtbAttentionModel,
    enroll: *const f64,
    n_enroll: usize,
    test: *const f64,
    dim: usize,
    out_score: *mut f64,
) -> AtbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out_arg(out_score, "out_score")?;
        let rows = rows_arg(enroll, n_enroll, dim)?;
        let test = slice_arg(test, dim, "test")?;
        *out = backend_forward(&rows, test, &m.params)?.0;
        Ok(())
    })
}

/// Loads a PLDA model file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn atb_plda_load(
    path: *const c_char,
    out: *mut *mut AtbPldaModel,
) -> AtbStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let model = PldaModel::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(AtbPldaModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`atb_plda_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn atb_plda_free(model: *mut AtbPldaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Raw embedding dimension accepted before preprocessing, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn atb_plda_dim(model: *const AtbPldaModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.input_dim())
}

/// PLDA verification score for one trial, same layout as
/// [`atb_attention_score`].
///
/// # Safety
/// All pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn atb_plda_score(
    model: *const AtbPldaModel,
    enroll: *const f64,
    n_enroll: usize,
    test: *const f64,
    dim: usize,
    mode: AtbPldaMode,
    out_score: *mut f64,
) -> AtbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out_arg(out_score, "out_score")?;
        let rows = rows_arg(enroll, n_enroll, dim)?;
        let test = slice_arg(test, dim, "test")?;
        let mode = match mode {
            AtbPldaMode::Mean => PldaMulti::Mean,
            AtbPldaMode::Concat => PldaMulti::ConcatEmbeddings,
        };
        *out = plda_score_multi(&m.model, &rows, test, mode)?;
        Ok(())
    })
}

/// Cosine similarity of two `dim`-vectors.
///
/// # Safety
/// `a` and `b` must hold `dim` values, `out_score` must be valid.
#[no_mangle]
pub unsafe extern "C" fn atb_cosine_score(
    a: *const f64,
    b: *const f64,
    dim: usize,
    out_score: *mut f64,
) -> AtbStatus {
    guard(|| {
        let out = out_arg(out_score, "out_score")?;
        *out = cosine_score(slice_arg(a, dim, "a")?, slice_arg(b, dim, "b")?)?;
        Ok(())
    })
}

/// Equal error rate of `n` scores. `is_target[i]` is nonzero for target trials.
/// `out_threshold` may be null.
///
/// # Safety
/// `scores` and `is_target` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn atb_eer(
    scores: *const f64,
    is_target: *const u8,
    n: usize,
    out_eer: *mut f64,
    out_threshold: *mut f64,
) -> AtbStatus {
    guard(|| {
        let out = out_arg(out_eer, "out_eer")?;
        let r = eer(&labeled_arg(scores, is_target, n)?)?;
        *out = r.eer;
        if let Some(t) = out_threshold.as_mut() {
            *t = r.threshold;
        }
        Ok(())
    })
}

/// Minimum normalized detection cost. `out_threshold` may be null.
///
/// # Safety
/// `scores` and `is_target` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn atb_min_dcf(
    scores: *const f64,
    is_target: *const u8,
    n: usize,
    p_target: f64,
    c_miss: f64,
    c_fa: f64,
    out_dcf: *mut f64,
    out_threshold: *mut f64,
) -> AtbStatus {
    guard(|| {
        let out = out_arg(out_dcf, "out_dcf")?;
        let op = OperatingPoint::new(p_target, c_miss, c_fa)?;
        let r = min_dcf(&labeled_arg(scores, is_target, n)?, &op)?;
        *out = r.min_dcf;
        if let Some(t) = out_threshold.as_mut() {
            *t = r.threshold;
        }
        Ok(())
    })
}
