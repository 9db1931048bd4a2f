//! C ABI over the recognizer.
//!
//! Handles are opaque; every fallible call returns a [`CslrStatus`] and
//! leaves a human-readable message retrievable via
//! [`cslr_last_error_message`]. Buffers are caller-owned; out-parameters
//! report required lengths.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use cslr_core::data::{generate_dataset, GenConfig};
use cslr_core::loss::{edit_alignment, greedy_decode, GlossSequence};
use cslr_core::model::{load_checkpoint, Model};
use cslr_core::tensor::{Session, TensorData};

/// Result of every fallible call.
#[repr(C)]
#[derive(Copy, Clone, PartialEq, Eq)]
pub enum CslrStatus {
    /// Success.
    Ok = 0,
    /// A pointer argument was null or a size was inconsistent.
    InvalidArgument = 1,
    /// Loading, parsing, or writing data failed; see the last error.
    DataError = 2,
    /// The computation itself failed; see the last error.
    NumericError = 3,
    /// The output buffer is too small; the required size was written.
    BufferTooSmall = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl std::fmt::Display) {
    let s = CString::new(msg.to_string()).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = s);
}

/// Copy the last error message (UTF-8, NUL-terminated) into `buf`. Returns
/// the full message length in bytes excluding the NUL; when `buf_len` is
/// too small the message is truncated.
///
/// # Safety
/// `buf` must point to `buf_len` writable bytes (or be null, in which case
/// only the length is reported).
#[no_mangle]
pub unsafe extern "C" fn cslr_last_error_message(buf: *mut c_char, buf_len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && buf_len > 0 {
            let n = bytes.len().min(buf_len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cslr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// An opaque loaded recognizer.
pub struct CslrModel {
    inner: Model<f32>,
}

unsafe fn cstr_path<'a>(p: *const c_char) -> Option<&'a Path> {
    if p.is_null() {
        return None;
    }
    CStr::from_ptr(p).to_str().ok().map(Path::new)
}

/// Load a self-describing checkpoint directory. Returns null on failure
/// (see [`cslr_last_error_message`]).
///
/// # Safety
/// `checkpoint_dir` must be a NUL-terminated UTF-8 path or null.
#[no_mangle]
pub unsafe extern "C" fn cslr_model_load(checkpoint_dir: *const c_char) -> *mut CslrModel {
    let Some(dir) = cstr_path(checkpoint_dir) else {
        set_error("checkpoint_dir is null or not UTF-8");
        return ptr::null_mut();
    };
    match load_checkpoint::<f32>(dir) {
        Ok(inner) => Box::into_raw(Box::new(CslrModel { inner })),
        Err(e) => {
            set_error(e);
            ptr::null_mut()
        }
    }
}

/// Release a model returned by [`cslr_model_load`]. Null is a no-op.
///
/// # Safety
/// `model` must have come from [`cslr_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cslr_model_free(model: *mut CslrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size (gloss ids run 1..=vocab_size; 0 is the blank).
///
/// # Safety
/// `model` must be a live handle from [`cslr_model_load`].
#[no_mangle]
pub unsafe extern "C" fn cslr_model_vocab_size(model: *const CslrModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config().vocab_size)
}

/// Recognize one video and write the decoded gloss ids.
///
/// `video` is row-major `[channels, frames, height, width]` (the layout the
/// dataset files use). On success `*out_len` holds the number of ids
/// written; when `out_cap` is too small, the required length is stored and
/// `CSLR_BUFFER_TOO_SMALL` returned.
///
/// # Safety
/// `video` must hold `channels*frames*height*width` floats; `out_ids` must
/// hold `out_cap` entries; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cslr_model_infer(
    model: *const CslrModel,
    video: *const f32,
    channels: usize,
    frames: usize,
    height: usize,
    width: usize,
    out_ids: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> CslrStatus {
    let (Some(m), false) = (model.as_ref(), video.is_null() || out_len.is_null()) else {
        set_error("null model, video, or out_len");
        return CslrStatus::InvalidArgument;
    };
    let numel = channels * frames * height * width;
    let data = std::slice::from_raw_parts(video, numel);
    let tensor = TensorData::new(vec![channels, frames, height, width], data.to_vec());
    let mut session = Session::inference(m.inner.params());
    let logits = match m.inner.forward(&mut session, &tensor) {
        Ok(out) => out.logits_global,
        Err(e) => {
            set_error(e);
            return CslrStatus::NumericError;
        }
    };
    let decoded = greedy_decode(session.graph.value(logits));
    *out_len = decoded.len();
    if decoded.len() > out_cap {
        set_error(format!("need space for {} ids", decoded.len()));
        return CslrStatus::BufferTooSmall;
    }
    for (i, &id) in decoded.ids().iter().enumerate() {
        *out_ids.add(i) = id as u32;
    }
    CslrStatus::Ok
}

/// Best-path decoding of a per-frame score matrix (`[frames, classes]`,
/// class 0 is the blank): argmax per frame, collapse repeats, drop blanks.
///
/// # Safety
/// `scores` must hold `frames*classes` floats; `out_ids` must hold
/// `out_cap` entries; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cslr_greedy_decode(
    scores: *const f32,
    frames: usize,
    classes: usize,
    out_ids: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> CslrStatus {
    if scores.is_null() || out_len.is_null() || classes == 0 {
        set_error("null scores/out_len or zero classes");
        return CslrStatus::InvalidArgument;
    }
    let data = std::slice::from_raw_parts(scores, frames * classes);
    let tensor = TensorData::new(vec![frames, classes], data.to_vec());
    let decoded = greedy_decode(&tensor);
    *out_len = decoded.len();
    if decoded.len() > out_cap {
        set_error(format!("need space for {} ids", decoded.len()));
        return CslrStatus::BufferTooSmall;
    }
    for (i, &id) in decoded.ids().iter().enumerate() {
        *out_ids.add(i) = id as u32;
    }
    CslrStatus::Ok
}

/// Minimum-edit alignment counts between a reference and a hypothesis.
#[repr(C)]
#[derive(Copy, Clone, Default)]
pub struct CslrEditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_length: usize,
}

/// Align two gloss id sequences (ids must be nonzero) and report the
/// substitution/insertion/deletion counts of Levenshtein alignment.
///
/// # Safety
/// `reference` and `hypothesis` must hold the stated number of entries;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cslr_edit_alignment(
    reference: *const u32,
    reference_len: usize,
    hypothesis: *const u32,
    hypothesis_len: usize,
    out: *mut CslrEditCounts,
) -> CslrStatus {
    if (reference.is_null() && reference_len > 0)
        || (hypothesis.is_null() && hypothesis_len > 0)
        || out.is_null()
    {
        set_error("null sequence or out pointer");
        return CslrStatus::InvalidArgument;
    }
    let to_seq = |p: *const u32, n: usize| -> Result<GlossSequence, CslrStatus> {
        let ids: Vec<usize> = if n == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(p, n)
                .iter()
                .map(|&v| v as usize)
                .collect()
        };
        GlossSequence::new(ids).map_err(|e| {
            set_error(e);
            CslrStatus::InvalidArgument
        })
    };
    let r = match to_seq(reference, reference_len) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let h = match to_seq(hypothesis, hypothesis_len) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let a = edit_alignment(&r, &h);
    *out = CslrEditCounts {
        substitutions: a.substitutions,
        insertions: a.insertions,
        deletions: a.deletions,
        reference_length: a.ref_len,
    };
    CslrStatus::Ok
}

/// Generate a synthetic dataset (train/dev splits plus manifest) under
/// `out_dir`, deterministically from `seed`.
///
/// # Safety
/// `out_dir` must be a NUL-terminated UTF-8 path.
#[no_mangle]
pub unsafe extern "C" fn cslr_generate_dataset(
    out_dir: *const c_char,
    num_train: usize,
    num_dev: usize,
    seed: u64,
) -> CslrStatus {
    let Some(dir) = cstr_path(out_dir) else {
        set_error("out_dir is null or not UTF-8");
        return CslrStatus::InvalidArgument;
    };
    match generate_dataset(seed, (num_train, num_dev), dir, &GenConfig::default()) {
        Ok(_) => CslrStatus::Ok,
        Err(e) => {
            set_error(e);
            CslrStatus::DataError
        }
    }
}
