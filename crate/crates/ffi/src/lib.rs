//! C ABI over `stare-core`: load a vocabulary or a checkpoint through an
//! opaque handle, then score token sequences.
//!
//! Every fallible call returns a [`StareStatus`]. On failure the message is
//! kept per thread and can be copied out with [`stare_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use stare_core::cli::{CliError, LoadedModel};
use stare_core::model::{ModelError, SequenceClassifier, Task};
use stare_core::traj::{discretize_duration, map_cell, CellId, Vocabulary};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StareStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    NotFound = 3,
    Parse = 4,
    InvalidArgument = 5,
    WrongTask = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

/// Opaque vocabulary handle.
pub struct StareVocab(Vocabulary);

/// Opaque model handle (encoder or recurrent baseline).
pub struct StareModel(LoadedModel);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: StareStatus, msg: impl Into<String>) -> StareStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn from_model_error(e: ModelError) -> StareStatus {
    let status = match e {
        ModelError::UnknownToken { .. } | ModelError::BadLength { .. } | ModelError::EmptyDataset => {
            StareStatus::InvalidArgument
        }
        ModelError::WrongTask(_) => StareStatus::WrongTask,
        _ => StareStatus::Internal,
    };
    fail(status, e.to_string())
}

fn from_cli_error(e: CliError) -> StareStatus {
    let status = match e {
        CliError::MissingFile(_) => StareStatus::NotFound,
        CliError::Schema(_) => StareStatus::Parse,
        CliError::TaskMismatch(_) => StareStatus::WrongTask,
        CliError::Other(_) => StareStatus::Internal,
    };
    fail(status, e.to_string())
}

/// Runs `f`, turning a panic into `Internal` instead of unwinding into C.
fn guard(f: impl FnOnce() -> StareStatus) -> StareStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(StareStatus::Internal, msg)
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, StareStatus> {
    if path.is_null() {
        return Err(fail(StareStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(path).to_str().map(PathBuf::from).map_err(|_| fail(StareStatus::InvalidUtf8, "path is not UTF-8"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stare_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to fit) and returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn stare_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a `vocab.json` written by `stare tokenize`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn stare_vocab_load(path: *const c_char, out: *mut *mut StareVocab) -> StareStatus {
    guard(|| {
        if out.is_null() {
            return fail(StareStatus::NullPointer, "out is null");
        }
        let p = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        if !p.exists() {
            return fail(StareStatus::NotFound, format!("{} does not exist", p.display()));
        }
        match Vocabulary::load(&p) {
            Ok(v) => {
                *out = Box::into_raw(Box::new(StareVocab(v)));
                StareStatus::Ok
            }
            Err(e) => fail(StareStatus::Parse, e.to_string()),
        }
    })
}

/// # Safety
/// `vocab` must be null or a handle from [`stare_vocab_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stare_vocab_free(vocab: *mut StareVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Number of token ids, or 0 for a null handle.
///
/// # Safety
/// `vocab` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stare_vocab_size(vocab: *const StareVocab) -> usize {
    vocab.as_ref().map_or(0, |v| v.0.size())
}

/// Fixed sequence length, or 0 for a null handle.
///
/// # Safety
/// `vocab` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stare_vocab_seq_len(vocab: *const StareVocab) -> usize {
    vocab.as_ref().map_or(0, |v| v.0.seq_len())
}

/// Token id of a cell, or -1 when the cell is not in the vocabulary.
///
/// # Safety
/// `vocab` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stare_vocab_cell_token(vocab: *const StareVocab, zoom: u8, index: u64) -> i64 {
    let Some(v) = vocab.as_ref() else { return -1 };
    v.0.cell_token(&CellId { zoom, index }).map_or(-1, i64::from)
}

/// Cell index containing a point at `zoom`.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn stare_map_cell(lat: f64, lon: f64, zoom: u8, out: *mut u64) -> StareStatus {
    if out.is_null() {
        return fail(StareStatus::NullPointer, "out is null");
    }
    match map_cell(lat, lon, zoom) {
        Ok(c) => {
            *out = c.index;
            StareStatus::Ok
        }
        Err(e) => fail(StareStatus::InvalidArgument, e.to_string()),
    }
}

/// Dwell time in whole blocks (ties to even, at least 1); 0 when `block` is
/// not positive.
#[no_mangle]
pub extern "C" fn stare_duration_blocks(dwell_seconds: i64, block_seconds: i64) -> u32 {
    if block_seconds <= 0 {
        0
    } else {
        discretize_duration(dwell_seconds, block_seconds)
    }
}

/// Loads any checkpoint written by `stare train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn stare_model_load(path: *const c_char, out: *mut *mut StareModel) -> StareStatus {
    guard(|| {
        if out.is_null() {
            return fail(StareStatus::NullPointer, "out is null");
        }
        let p = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match LoadedModel::load(&p) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(StareModel(m)));
                StareStatus::Ok
            }
            Err(e) => from_cli_error(e),
        }
    })
}

/// # Safety
/// `model` must be null or a handle from [`stare_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stare_model_free(model: *mut StareModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Output width of [`stare_model_predict`]: class count, or 0 for a masked
/// location model or a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stare_model_n_classes(model: *const StareModel) -> usize {
    match model.as_ref().map(|m| &m.0) {
        Some(LoadedModel::Stare(m)) if m.config().task == Task::Classification => m.n_classes(),
        Some(LoadedModel::Recurrent(m)) => m.n_classes(),
        _ => 0,
    }
}

/// Class probabilities for `n_seqs` sequences of `seq_len` tokens each,
/// stored row-major in `tokens`. Writes `n_seqs * n_classes` values to `out`.
///
/// # Safety
/// `tokens` must be valid for `n_seqs * seq_len` reads and `out` for
/// `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn stare_model_predict(
    model: *const StareModel,
    tokens: *const u32,
    n_seqs: usize,
    seq_len: usize,
    out: *mut f64,
    out_len: usize,
) -> StareStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(StareStatus::NullPointer, "model is null");
        };
        if tokens.is_null() || out.is_null() {
            return fail(StareStatus::NullPointer, "tokens or out is null");
        }
        if n_seqs == 0 || seq_len == 0 {
            return fail(StareStatus::InvalidArgument, "empty batch");
        }
        let k = stare_model_n_classes(model);
        if k == 0 {
            return fail(StareStatus::WrongTask, "model has no classification head");
        }
        let Some(need) = n_seqs.checked_mul(k) else {
            return fail(StareStatus::InvalidArgument, "batch too large");
        };
        if out_len < need {
            return fail(StareStatus::BufferTooSmall, format!("need {need} values, got {out_len}"));
        }
        let flat = std::slice::from_raw_parts(tokens, n_seqs * seq_len);
        let batch: Vec<&[u32]> = flat.chunks(seq_len).collect();
        let probs = match &m.0 {
            LoadedModel::Stare(e) => e.predict_proba(&batch),
            LoadedModel::Recurrent(r) => r.predict_proba(&batch),
        };
        match probs {
            Ok(rows) => {
                let dst = std::slice::from_raw_parts_mut(out, need);
                for (d, v) in dst.iter_mut().zip(rows.iter().flatten()) {
                    *d = *v;
                }
                StareStatus::Ok
            }
            Err(e) => from_model_error(e),
        }
    })
}
