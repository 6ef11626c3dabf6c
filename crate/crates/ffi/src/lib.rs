//! C ABI for the genreg toolkit: opaque handles, status codes, and a
//! thread-local last-error message. Every function is callable from C;
//! the header is generated into include/genreg.h at build time.

use genreg::checkpoint::{Checkpoint, HeadParams};
use genreg::codec;
use genreg::inference;
use genreg::vocab::{build_dynamic, DynamicParams, ValueVocabulary};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Call outcome. Zero is success; nonzero codes describe the failure
/// class and `genreg_last_error` carries the message.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GenregStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Mismatch = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|c| *c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn fail(status: GenregStatus, msg: &str) -> GenregStatus {
    set_error(msg);
    status
}

fn guard<F: FnOnce() -> GenregStatus>(f: F) -> GenregStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(GenregStatus::Internal, "internal panic"),
    }
}

/// Opaque value-vocabulary handle.
pub struct GenregVocab {
    inner: ValueVocabulary,
}

/// Opaque trained-model handle (checkpoint plus, for generative heads,
/// its vocabulary).
pub struct GenregModel {
    ckpt: Checkpoint,
    vocab: Option<ValueVocabulary>,
}

unsafe fn path_from(ptr: *const c_char) -> Result<&'static Path, GenregStatus> {
    if ptr.is_null() {
        return Err(fail(GenregStatus::NullArgument, "null path"));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(fail(GenregStatus::InvalidArgument, "path is not UTF-8")),
    }
}

/// Copy the last error message into `buf` (NUL-terminated, truncated to
/// `cap`). Returns the full message length in bytes, excluding the NUL.
///
/// # Safety
/// `buf` must point to `cap` writable bytes (or be NULL to query the
/// required length).
#[no_mangle]
pub unsafe extern "C" fn genreg_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn genreg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

// ── vocabulary ──────────────────────────────────────────────────────────

/// Build a vocabulary with the dynamic-percentile algorithm over
/// `targets[0..len]`. On success writes a new handle to `out`.
///
/// # Safety
/// `targets` must point to `len` readable doubles; `out` must be a valid
/// pointer slot. Free the handle with `genreg_vocab_free`.
#[no_mangle]
pub unsafe extern "C" fn genreg_vocab_build_dynamic(
    targets: *const f64,
    len: usize,
    q_start: f64,
    q_end: f64,
    alpha: f64,
    eps: f64,
    resolution: f64,
    max_iters: usize,
    out: *mut *mut GenregVocab,
) -> GenregStatus {
    guard(|| {
        if targets.is_null() || out.is_null() {
            return fail(GenregStatus::NullArgument, "null targets or out pointer");
        }
        let ys = std::slice::from_raw_parts(targets, len);
        let params = DynamicParams {
            q_start,
            q_end,
            alpha,
            eps,
            resolution,
            max_iters,
        };
        match build_dynamic(ys, params) {
            Ok(v) => {
                *out = Box::into_raw(Box::new(GenregVocab { inner: v }));
                GenregStatus::Ok
            }
            Err(e) => fail(GenregStatus::InvalidArgument, &e.to_string()),
        }
    })
}

/// Load a vocabulary file.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` a valid slot.
#[no_mangle]
pub unsafe extern "C" fn genreg_vocab_load(
    path: *const c_char,
    out: *mut *mut GenregVocab,
) -> GenregStatus {
    guard(|| {
        if out.is_null() {
            return fail(GenregStatus::NullArgument, "null out pointer");
        }
        let path = match path_from(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match ValueVocabulary::load(path) {
            Ok(v) => {
                *out = Box::into_raw(Box::new(GenregVocab { inner: v }));
                GenregStatus::Ok
            }
            Err(e) => fail(GenregStatus::Parse, &e.to_string()),
        }
    })
}

/// Save a vocabulary to a file.
///
/// # Safety
/// `vocab` must be a live handle; `path` a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn genreg_vocab_save(
    vocab: *const GenregVocab,
    path: *const c_char,
) -> GenregStatus {
    guard(|| {
        let Some(v) = vocab.as_ref() else {
            return fail(GenregStatus::NullArgument, "null vocab");
        };
        let path = match path_from(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match v.inner.save(path) {
            Ok(()) => GenregStatus::Ok,
            Err(e) => fail(GenregStatus::Io, &e.to_string()),
        }
    })
}

/// Number of value tokens (excludes the three special ids).
///
/// # Safety
/// `vocab` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn genreg_vocab_len(vocab: *const GenregVocab) -> usize {
    vocab.as_ref().map_or(0, |v| v.inner.num_value_tokens())
}

/// Token value at descending-order index `index`.
///
/// # Safety
/// `vocab` must be a live handle; `out` a valid slot.
#[no_mangle]
pub unsafe extern "C" fn genreg_vocab_value(
    vocab: *const GenregVocab,
    index: usize,
    out: *mut f64,
) -> GenregStatus {
    guard(|| {
        let Some(v) = vocab.as_ref() else {
            return fail(GenregStatus::NullArgument, "null vocab");
        };
        if out.is_null() {
            return fail(GenregStatus::NullArgument, "null out pointer");
        }
        match v.inner.values().get(index) {
            Some(val) => {
                *out = *val;
                GenregStatus::Ok
            }
            None => fail(GenregStatus::InvalidArgument, "token index out of range"),
        }
    })
}

/// Destroy a vocabulary handle (NULL is a no-op).
///
/// # Safety
/// `vocab` must have come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn genreg_vocab_free(vocab: *mut GenregVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

// ── codec ───────────────────────────────────────────────────────────────

/// Greedy-encode `y` into token ids. Writes up to `cap` ids into
/// `out_ids`, the emitted count into `out_len`, and the residual left
/// after encoding into `out_residual` (when non-NULL).
///
/// # Safety
/// `out_ids` must point to `cap` writable u32 slots; other pointers as
/// documented.
#[no_mangle]
pub unsafe extern "C" fn genreg_encode(
    vocab: *const GenregVocab,
    y: f64,
    t_max: usize,
    out_ids: *mut u32,
    cap: usize,
    out_len: *mut usize,
    out_residual: *mut f64,
) -> GenregStatus {
    guard(|| {
        let Some(v) = vocab.as_ref() else {
            return fail(GenregStatus::NullArgument, "null vocab");
        };
        if out_ids.is_null() || out_len.is_null() {
            return fail(GenregStatus::NullArgument, "null output pointer");
        }
        match codec::encode(y, &v.inner, t_max) {
            Ok(seq) => {
                if seq.ids.len() > cap {
                    return fail(
                        GenregStatus::BufferTooSmall,
                        &format!("need {} id slots, have {cap}", seq.ids.len()),
                    );
                }
                std::ptr::copy_nonoverlapping(seq.ids.as_ptr(), out_ids, seq.ids.len());
                *out_len = seq.ids.len();
                if !out_residual.is_null() {
                    *out_residual = seq.encoding_error;
                }
                GenregStatus::Ok
            }
            Err(e) => fail(GenregStatus::InvalidArgument, &e.to_string()),
        }
    })
}

/// Decode a token-id sequence back to its value sum.
///
/// # Safety
/// `ids` must point to `len` readable u32 values; `out` a valid slot.
#[no_mangle]
pub unsafe extern "C" fn genreg_decode(
    vocab: *const GenregVocab,
    ids: *const u32,
    len: usize,
    out: *mut f64,
) -> GenregStatus {
    guard(|| {
        let Some(v) = vocab.as_ref() else {
            return fail(GenregStatus::NullArgument, "null vocab");
        };
        if (ids.is_null() && len > 0) || out.is_null() {
            return fail(GenregStatus::NullArgument, "null ids or out pointer");
        }
        let ids = if len == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(ids, len)
        };
        match codec::decode(ids, &v.inner) {
            Ok(y) => {
                *out = y;
                GenregStatus::Ok
            }
            Err(e) => fail(GenregStatus::InvalidArgument, &e.to_string()),
        }
    })
}

// ── model ───────────────────────────────────────────────────────────────

/// Load a checkpoint. Generative checkpoints also need `vocab_path`
/// (validated against the checkpoint's vocabulary fingerprint); pass
/// NULL for regression or ordinal checkpoints.
///
/// # Safety
/// Paths are NUL-terminated UTF-8 strings; `out` a valid slot. Free the
/// handle with `genreg_model_free`.
#[no_mangle]
pub unsafe extern "C" fn genreg_model_load(
    ckpt_path: *const c_char,
    vocab_path: *const c_char,
    out: *mut *mut GenregModel,
) -> GenregStatus {
    guard(|| {
        if out.is_null() {
            return fail(GenregStatus::NullArgument, "null out pointer");
        }
        let ckpt_path = match path_from(ckpt_path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let ckpt = match Checkpoint::load(ckpt_path) {
            Ok(c) => c,
            Err(e) => return fail(GenregStatus::Parse, &e.to_string()),
        };
        let vocab = match (&ckpt.head, vocab_path.is_null()) {
            (HeadParams::Gr(_), true) => {
                return fail(
                    GenregStatus::InvalidArgument,
                    "generative checkpoints require a vocabulary path",
                )
            }
            (HeadParams::Gr(_), false) => {
                let vp = match path_from(vocab_path) {
                    Ok(p) => p,
                    Err(s) => return s,
                };
                let bytes = match std::fs::read(vp) {
                    Ok(b) => b,
                    Err(e) => return fail(GenregStatus::Io, &e.to_string()),
                };
                let fp = genreg::fingerprint::fingerprint_bytes(&bytes);
                if fp != ckpt.vocab_fingerprint {
                    return fail(
                        GenregStatus::Mismatch,
                        &format!(
                            "vocabulary fingerprint {fp} does not match checkpoint {}",
                            ckpt.vocab_fingerprint
                        ),
                    );
                }
                match ValueVocabulary::load(vp) {
                    Ok(v) => Some(v),
                    Err(e) => return fail(GenregStatus::Parse, &e.to_string()),
                }
            }
            (_, _) => None,
        };
        *out = Box::into_raw(Box::new(GenregModel { ckpt, vocab }));
        GenregStatus::Ok
    })
}

/// Expected feature-vector length of the loaded model.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn genreg_model_feature_dim(model: *const GenregModel) -> usize {
    model.as_ref().map_or(0, |m| m.ckpt.head.config().feature_dim)
}

/// Head kind of the loaded model: 0 generative, 1 value regression,
/// 2 bucket ordinal, -1 on a NULL handle.
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn genreg_model_head(model: *const GenregModel) -> i32 {
    match model.as_ref() {
        None => -1,
        Some(m) => match m.ckpt.head {
            HeadParams::Gr(_) => 0,
            HeadParams::Vr(_) => 1,
            HeadParams::Ordinal(_) => 2,
        },
    }
}

/// Predict the target for one raw (unstandardized) feature row.
///
/// # Safety
/// `features` must point to `len` readable doubles matching the model's
/// feature dimension; `out_y` a valid slot.
#[no_mangle]
pub unsafe extern "C" fn genreg_model_predict(
    model: *const GenregModel,
    features: *const f64,
    len: usize,
    out_y: *mut f64,
) -> GenregStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(GenregStatus::NullArgument, "null model");
        };
        if features.is_null() || out_y.is_null() {
            return fail(GenregStatus::NullArgument, "null features or out pointer");
        }
        let x = std::slice::from_raw_parts(features, len);
        if x.len() != m.ckpt.head.config().feature_dim {
            return fail(
                GenregStatus::InvalidArgument,
                &format!(
                    "feature length {len} does not match model feature_dim {}",
                    m.ckpt.head.config().feature_dim
                ),
            );
        }
        let z = m.ckpt.standardizer.apply_row(x);
        let result = match &m.ckpt.head {
            HeadParams::Gr(params) => inference::predict(
                &z,
                params,
                m.vocab.as_ref().expect("vocab checked at load"),
                params.config.t_max,
                m.ckpt.mixup_window > 0,
                m.ckpt.mixup_window,
            )
            .map(|p| p.y),
            HeadParams::Vr(params) => genreg::baselines::vr_predict(&z, params),
            HeadParams::Ordinal(params) => genreg::baselines::ordinal_predict(&z, params),
        };
        match result {
            Ok(y) => {
                *out_y = y;
                GenregStatus::Ok
            }
            Err(e) => fail(GenregStatus::Internal, &e.to_string()),
        }
    })
}

/// Destroy a model handle (NULL is a no-op).
///
/// # Safety
/// `model` must have come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn genreg_model_free(model: *mut GenregModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
