//! C ABI over the `gemb` toolkit.
//!
//! Every fallible call returns an `int32_t` status (`GEMB_OK` on success) and
//! leaves a message for [`gemb_last_error`] on failure. Handles are opaque and
//! must be released with their `_free` function. Strings are NUL-terminated
//! UTF-8. Panics never cross the boundary; they surface as `GEMB_ERR_PANIC`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use gemb::encoder::Encoder;
use gemb::io::checkpoint::Checkpoint;
use gemb::io::files::TextRecord;
use gemb::retrieval::{build_index, embed_texts, truncate_rows, RetrievalIndex};
use gemb::tensor::Tensor;
use gemb::Error;

pub const GEMB_OK: i32 = 0;
/// A required pointer was null or a string was not UTF-8.
pub const GEMB_ERR_ARGUMENT: i32 = 1;
/// Bad input data: malformed files, zero vectors, unknown ids, wrong widths.
pub const GEMB_ERR_INPUT: i32 = 2;
pub const GEMB_ERR_IO: i32 = 3;
pub const GEMB_ERR_CONFIG: i32 = 4;
pub const GEMB_ERR_INCOMPATIBLE: i32 = 5;
pub const GEMB_ERR_NUMERICAL: i32 = 6;
/// The caller's output buffer is smaller than required.
pub const GEMB_ERR_BUFFER: i32 = 7;
pub const GEMB_ERR_PANIC: i32 = 8;

/// A loaded encoder.
pub struct GembModel {
    encoder: Encoder,
}

/// A retrieval index over unit-normalized document embeddings.
pub struct GembIndex {
    index: RetrievalIndex,
    c_ids: Vec<CString>,
    rows: HashMap<String, usize>,
}

/// One search result. `row` indexes the document id via [`gemb_index_id`].
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GembHit {
    pub row: usize,
    pub score: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => GEMB_ERR_IO,
            Error::Config(_) => GEMB_ERR_CONFIG,
            Error::IncompatibleCheckpoint(_) => GEMB_ERR_INCOMPATIBLE,
            Error::Numerical { .. } => GEMB_ERR_NUMERICAL,
            Error::Contract(_) => GEMB_ERR_ARGUMENT,
            _ => GEMB_ERR_INPUT,
        };
        Failure(code, e.to_string())
    }
}

fn arg(msg: impl Into<String>) -> Failure {
    Failure(GEMB_ERR_ARGUMENT, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GEMB_OK
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            GEMB_ERR_PANIC
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(arg(format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| arg(format!("{name} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(arg(format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn out_ptr<T>(p: *mut T, name: &str) -> Result<*mut T, Failure> {
    if p.is_null() {
        Err(arg(format!("{name} is null")))
    } else {
        Ok(p)
    }
}

/// Message for the most recent failed call on this thread; empty after a
/// successful call. Valid until the next `gemb_*` call on the same thread.
#[no_mangle]
pub extern "C" fn gemb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file into a new model handle.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gemb_model_load(path: *const c_char, out: *mut *mut GembModel) -> i32 {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let encoder = Checkpoint::load(path)?.into_encoder()?;
        *out = Box::into_raw(Box::new(GembModel { encoder }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`gemb_model_load`] and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn gemb_model_free(model: *mut GembModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Full embedding width of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gemb_model_dim(model: *const GembModel) -> usize {
    model.as_ref().map_or(0, |m| m.encoder.config.d_out)
}

/// Embeds one text into `out[0..dim]`, unit-normalized. `dim` 0 means the
/// full width; otherwise it must be one of the model's nested widths. `task`
/// may be null. `as_query` nonzero selects the query-side modality marker.
///
/// # Safety
/// `model` must be a live handle, `text` a valid C string, `task` null or a
/// valid C string, and `out` must point at `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn gemb_model_embed(
    model: *const GembModel,
    text: *const c_char,
    task: *const c_char,
    as_query: i32,
    dim: usize,
    out: *mut f64,
    out_len: usize,
) -> i32 {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| arg("model is null"))?;
        let text = str_arg(text, "text")?;
        let task = opt_str_arg(task, "task")?;
        let enc = &model.encoder;
        let width = if dim == 0 { enc.config.d_out } else { dim };
        if out_len < width {
            return Err(Failure(GEMB_ERR_BUFFER, format!("output holds {out_len} values, need {width}")));
        }
        let out = out_ptr(out, "out")?;
        let rec = TextRecord {
            task: task.map(str::to_string),
            ..TextRecord::new("text", text)
        };
        let raw = embed_texts(enc, &[rec], as_query != 0, false)?;
        // the full width is always a nested width, so this also normalizes
        let t = truncate_rows(&raw, width, &enc.config.mrl_dims)?;
        std::slice::from_raw_parts_mut(out, width).copy_from_slice(t.row(0));
        Ok(())
    })
}

fn wrap_index(index: RetrievalIndex) -> Result<GembIndex, Failure> {
    let c_ids = index
        .ids()
        .iter()
        .map(|s| CString::new(s.as_str()).map_err(|_| Failure(GEMB_ERR_INPUT, format!("id {s:?} contains NUL"))))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = index.ids().iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    Ok(GembIndex { index, c_ids, rows })
}

/// Builds an index from `n` row-major embeddings of width `dim`. Rows are
/// normalized; zero rows and duplicate ids are rejected.
///
/// # Safety
/// `ids` must hold `n` valid C strings, `embeddings` `n * dim` doubles, and
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gemb_index_build(
    ids: *const *const c_char,
    embeddings: *const f64,
    n: usize,
    dim: usize,
    out: *mut *mut GembIndex,
) -> i32 {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let id_ptrs = slice_arg(ids, n, "ids")?;
        let total = n.checked_mul(dim).ok_or_else(|| arg("n * dim overflows"))?;
        let data = slice_arg(embeddings, total, "embeddings")?;
        let ids = id_ptrs
            .iter()
            .enumerate()
            .map(|(i, &p)| str_arg(p, &format!("ids[{i}]")).map(str::to_string))
            .collect::<Result<Vec<_>, _>>()?;
        let matrix = Tensor::matrix(n, dim, data.to_vec())?;
        let index = wrap_index(build_index(ids, &matrix)?)?;
        *out = Box::into_raw(Box::new(index));
        Ok(())
    })
}

/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gemb_index_load(path: *const c_char, out: *mut *mut GembIndex) -> i32 {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let index = wrap_index(RetrievalIndex::load(str_arg(path, "path")?)?)?;
        *out = Box::into_raw(Box::new(index));
        Ok(())
    })
}

/// # Safety
/// `index` must be a live handle and `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn gemb_index_save(index: *const GembIndex, path: *const c_char) -> i32 {
    guard(|| {
        let index = index.as_ref().ok_or_else(|| arg("index is null"))?;
        index.index.save(str_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `index` must come from a `gemb_index_*` constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gemb_index_free(index: *mut GembIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gemb_index_len(index: *const GembIndex) -> usize {
    index.as_ref().map_or(0, |i| i.index.len())
}

/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gemb_index_dim(index: *const GembIndex) -> usize {
    index.as_ref().map_or(0, |i| i.index.dim())
}

/// Document id of `row`, or null when out of range. The string lives as long
/// as the index.
///
/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gemb_index_id(index: *const GembIndex, row: usize) -> *const c_char {
    index
        .as_ref()
        .and_then(|i| i.c_ids.get(row))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// Top-`k` cosine search. Writes up to `k` hits (best first; ties broken by
/// ascending id) and stores the count in `n_hits`.
///
/// # Safety
/// `index` must be a live handle, `query` must hold `dim` doubles, `hits`
/// must have room for `k` entries, and `n_hits` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gemb_index_search(
    index: *const GembIndex,
    query: *const f64,
    dim: usize,
    k: usize,
    hits: *mut GembHit,
    n_hits: *mut usize,
) -> i32 {
    guard(|| {
        let n_hits = out_ptr(n_hits, "n_hits")?;
        *n_hits = 0;
        let index = index.as_ref().ok_or_else(|| arg("index is null"))?;
        let query = slice_arg(query, dim, "query")?;
        let found = index.index.search(query, k)?;
        if !found.is_empty() {
            let hits = std::slice::from_raw_parts_mut(out_ptr(hits, "hits")?, found.len());
            for (slot, h) in hits.iter_mut().zip(&found) {
                *slot = GembHit {
                    row: index.rows[&h.id],
                    score: h.score,
                };
            }
        }
        *n_hits = found.len();
        Ok(())
    })
}

/// Writes the weighted average of `n` checkpoints to `out_path`. Weights must
/// be finite, non-negative and not all zero.
///
/// # Safety
/// `paths` must hold `n` valid C strings, `weights` `n` doubles, and
/// `out_path` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn gemb_soup(
    paths: *const *const c_char,
    weights: *const f64,
    n: usize,
    out_path: *const c_char,
) -> i32 {
    guard(|| {
        let path_ptrs = slice_arg(paths, n, "paths")?;
        let weights = slice_arg(weights, n, "weights")?;
        let out = str_arg(out_path, "out_path")?;
        let inputs = path_ptrs
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (&p, &w))| Ok((PathBuf::from(str_arg(p, &format!("paths[{i}]"))?), w)))
            .collect::<Result<Vec<_>, Failure>>()?;
        gemb::soup::soup_files(&inputs)?.save(out)?;
        Ok(())
    })
}
