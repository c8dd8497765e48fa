//! C ABI over `cift-core`.
//!
//! Every function returns a [`CiftStatus`]. On failure a message is kept
//! per thread and can be read with [`cift_last_error`]. Objects crossing the
//! boundary are opaque handles released by their matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cift::cif::{plan, FireMode};
use cift::harness::{checkpoint, eval};
use cift::losses::{ctc_nll, rnnt_nll};
use cift::model::{DecodeResult, Mode, ModelConfig, ParamStore};
use cift::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CiftStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Bad configuration or checkpoint.
    Config = 3,
    /// Unreadable, malformed or infeasible input data.
    Data = 4,
    /// Shape, alignment or numerical failure.
    Numerical = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CiftMode {
    Cift = 0,
    RnntBaseline = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CiftModelInfo {
    /// A [`CiftMode`] value.
    pub mode: u32,
    pub vocab: usize,
    pub feat_dim: usize,
    pub d_model: usize,
    pub num_parameters: usize,
}

/// One threshold crossing: `first + second == available`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CiftBoundary {
    pub frame: usize,
    pub available: f64,
    pub first: f64,
    pub second: f64,
}

/// A loaded checkpoint.
pub struct CiftModel {
    params: ParamStore,
    model: ModelConfig,
    mode: Mode,
}

/// Greedy hypothesis of one utterance.
pub struct CiftDecode {
    tokens: Vec<u32>,
    frames: Vec<usize>,
    top1: Vec<f64>,
    fire_count: usize,
}

/// Output of integrate-and-fire on raw arrays.
pub struct CiftFire {
    embeddings: Vec<f64>,
    dim: usize,
    fire_count: usize,
    boundaries: Vec<CiftBoundary>,
    residue: f64,
    consumed: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> CiftStatus {
    match e {
        Error::Config(_) | Error::Checkpoint(_) => CiftStatus::Config,
        Error::Parse { .. }
        | Error::Schema(_)
        | Error::Io { .. }
        | Error::Vocabulary { .. }
        | Error::InfeasibleSample(_)
        | Error::DegenerateInput(_) => CiftStatus::Data,
        _ => CiftStatus::Numerical,
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (CiftStatus, String)>) -> CiftStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CiftStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CiftStatus::Panic
        }
    }
}

fn lib(e: Error) -> (CiftStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (CiftStatus, String) {
    (CiftStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> (CiftStatus, String) {
    (CiftStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` must be null or point to `n` readable values.
unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (CiftStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn to_ids(targets: &[u32]) -> Vec<usize> {
    targets.iter().map(|&t| t as usize).collect()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cift_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the most recent failure on this thread (empty after a
/// success). Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn cift_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint written by `cift train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cift_model_load(path: *const c_char, out: *mut *mut CiftModel) -> CiftStatus {
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
            .map_err(|_| invalid("path is not UTF-8"))?;
        let (params, cfg) = checkpoint::load(path).map_err(lib)?;
        let model = CiftModel {
            params,
            model: cfg.model,
            mode: cfg.mode,
        };
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`cift_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cift_model_free(model: *mut CiftModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cift_model_info(model: *const CiftModel, out: *mut CiftModelInfo) -> CiftStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = CiftModelInfo {
            mode: match m.mode {
                Mode::Cift => CiftMode::Cift as u32,
                Mode::RnntBaseline => CiftMode::RnntBaseline as u32,
            },
            vocab: m.model.vocab,
            feat_dim: m.model.feat_dim,
            d_model: m.model.d_model,
            num_parameters: m.params.num_scalars(),
        };
        Ok(())
    })
}

/// Greedy decoding of one utterance given row-major `features`
/// (`frames × feat_dim`).
///
/// # Safety
/// `features` must hold `frames * feat_dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cift_model_decode(
    model: *const CiftModel,
    features: *const f64,
    frames: usize,
    feat_dim: usize,
    out: *mut *mut CiftDecode,
) -> CiftStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if feat_dim != m.model.feat_dim {
            return Err(invalid(format!(
                "model expects {} features per frame, got {feat_dim}",
                m.model.feat_dim
            )));
        }
        let n = frames
            .checked_mul(feat_dim)
            .ok_or_else(|| invalid("feature size overflows"))?;
        let data = slice(features, n, "features")?.to_vec();
        let utt = cift::data::Utterance {
            id: String::new(),
            features: Tensor::new(vec![frames, feat_dim], data).map_err(lib)?,
            targets: Vec::new(),
            spans: None,
        };
        let r: DecodeResult = eval::decode_one(&m.params, &m.model, m.mode, &utt).map_err(lib)?;
        let d = CiftDecode {
            tokens: r.tokens.iter().map(|&t| t as u32).collect(),
            frames: r.boundaries.clone(),
            top1: r.top1(),
            fire_count: r.fire_count,
        };
        *out = Box::into_raw(Box::new(d));
        Ok(())
    })
}

/// Number of emitted tokens.
///
/// # Safety
/// `d` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cift_decode_len(d: *const CiftDecode) -> usize {
    d.as_ref().map_or(0, |d| d.tokens.len())
}

/// Token ids, `cift_decode_len` entries; owned by the handle.
///
/// # Safety
/// `d` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cift_decode_tokens(d: *const CiftDecode) -> *const u32 {
    d.as_ref().map_or(ptr::null(), |d| d.tokens.as_ptr())
}

/// Encoder frame of each token.
///
/// # Safety
/// `d` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cift_decode_frames(d: *const CiftDecode) -> *const usize {
    d.as_ref().map_or(ptr::null(), |d| d.frames.as_ptr())
}

/// Probability of each emitted token.
///
/// # Safety
/// `d` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cift_decode_top1(d: *const CiftDecode) -> *const f64 {
    d.as_ref().map_or(ptr::null(), |d| d.top1.as_ptr())
}

/// Embeddings fired at inference (0 for the baseline).
///
/// # Safety
/// `d` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cift_decode_fire_count(d: *const CiftDecode) -> usize {
    d.as_ref().map_or(0, |d| d.fire_count)
}

/// # Safety
/// `d` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cift_decode_free(d: *mut CiftDecode) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Integrate-and-fire over `h` (`frames × dim`, row-major) and `alpha`
/// (`frames`). A negative `target_len` selects inference firing with the
/// given `tail_threshold`; otherwise exactly `target_len` cells are fired
/// from weights that must already sum to it.
///
/// # Safety
/// Array arguments must hold the stated number of doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cift_cif_fire(
    h: *const f64,
    alpha: *const f64,
    frames: usize,
    dim: usize,
    beta: f64,
    target_len: i64,
    tail_threshold: f64,
    out: *mut *mut CiftFire,
) -> CiftStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let n = frames.checked_mul(dim).ok_or_else(|| invalid("frame size overflows"))?;
        let h = slice(h, n, "h")?;
        let alpha = slice(alpha, frames, "alpha")?;
        let mode = if target_len < 0 {
            FireMode::Infer { tail_threshold }
        } else {
            FireMode::Train {
                target_len: target_len as usize,
            }
        };
        let p = plan(h, dim, alpha, beta, mode).map_err(lib)?;
        let f = CiftFire {
            dim,
            fire_count: p.fire_count,
            boundaries: p
                .boundaries
                .iter()
                .map(|b| CiftBoundary {
                    frame: b.frame,
                    available: b.available,
                    first: b.first,
                    second: b.second,
                })
                .collect(),
            residue: p.residue.weight,
            consumed: p.consumed,
            embeddings: p.embeddings,
        };
        *out = Box::into_raw(Box::new(f));
        Ok(())
    })
}

/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cift_fire_count(f: *const CiftFire) -> usize {
    f.as_ref().map_or(0, |f| f.fire_count)
}

/// Fired embeddings, `count × dim` row-major; owned by the handle.
///
/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cift_fire_embeddings(f: *const CiftFire) -> *const f64 {
    f.as_ref().map_or(ptr::null(), |f| f.embeddings.as_ptr())
}

/// Embedding width the handle was built with.
///
/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cift_fire_dim(f: *const CiftFire) -> usize {
    f.as_ref().map_or(0, |f| f.dim)
}

/// Threshold crossings; writes their number to `len`.
///
/// # Safety
/// `f` must be null or a live handle; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cift_fire_boundaries(f: *const CiftFire, len: *mut usize) -> *const CiftBoundary {
    let Some(f) = f.as_ref() else { return ptr::null() };
    if let Some(len) = len.as_mut() {
        *len = f.boundaries.len();
    }
    f.boundaries.as_ptr()
}

/// Weight left accumulated after the last crossing.
///
/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cift_fire_residue(f: *const CiftFire) -> f64 {
    f.as_ref().map_or(0.0, |f| f.residue)
}

/// Weight assigned to fired cells, excluding a fired tail.
///
/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cift_fire_consumed(f: *const CiftFire) -> f64 {
    f.as_ref().map_or(0.0, |f| f.consumed)
}

/// # Safety
/// `f` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cift_fire_free(f: *mut CiftFire) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// CTC negative log-likelihood over `logits` (`frames × classes`, blank is
/// the last class). `grad`, when not null, receives `frames × classes`
/// gradient values.
///
/// # Safety
/// Arrays must hold the stated sizes; `loss` writable.
#[no_mangle]
pub unsafe extern "C" fn cift_ctc_loss(
    logits: *const f64,
    frames: usize,
    classes: usize,
    targets: *const u32,
    num_targets: usize,
    loss: *mut f64,
    grad: *mut f64,
) -> CiftStatus {
    guard(|| {
        let n = frames
            .checked_mul(classes)
            .ok_or_else(|| invalid("logit size overflows"))?;
        let x = Tensor::new(vec![frames, classes], slice(logits, n, "logits")?.to_vec()).map_err(lib)?;
        let ids = to_ids(slice(targets, num_targets, "targets")?);
        write_loss(ctc_nll(&x, &ids).map_err(lib)?, loss, grad)
    })
}

/// Transducer negative log-likelihood over `logits`
/// (`frames × (num_targets + 1) × classes`, blank last). `grad` as for
/// [`cift_ctc_loss`].
///
/// # Safety
/// Arrays must hold the stated sizes; `loss` writable.
#[no_mangle]
pub unsafe extern "C" fn cift_rnnt_loss(
    logits: *const f64,
    frames: usize,
    classes: usize,
    targets: *const u32,
    num_targets: usize,
    loss: *mut f64,
    grad: *mut f64,
) -> CiftStatus {
    guard(|| {
        let u1 = num_targets + 1;
        let n = frames
            .checked_mul(u1)
            .and_then(|v| v.checked_mul(classes))
            .ok_or_else(|| invalid("logit size overflows"))?;
        let x = Tensor::new(vec![frames, u1, classes], slice(logits, n, "logits")?.to_vec()).map_err(lib)?;
        let ids = to_ids(slice(targets, num_targets, "targets")?);
        write_loss(rnnt_nll(&x, &ids).map_err(lib)?, loss, grad)
    })
}

unsafe fn write_loss((nll, g): (f64, Vec<f64>), loss: *mut f64, grad: *mut f64) -> Result<(), (CiftStatus, String)> {
    let loss = loss.as_mut().ok_or_else(|| null("loss"))?;
    *loss = nll;
    if !grad.is_null() {
        ptr::copy_nonoverlapping(g.as_ptr(), grad, g.len());
    }
    Ok(())
}
