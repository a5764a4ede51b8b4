//! C ABI over `transfer-curate`.
//!
//! Stores and curation results are opaque heap handles released with their
//! `*_free` function. Every call returns a [`TcStatus`]; on failure the message
//! is available from [`tc_last_error`] on the same thread. Panics never cross
//! the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ndarray::ArrayView2;
use transfer_curate::curation::{query_balanced_select, CurationRequest, CurationResult, Strategy};
use transfer_curate::knn::{top_k, SearchOptions};
use transfer_curate::losses::{cross_entropy, info_nce_contrastive, kd_kl_loss, LossOutput};
use transfer_curate::store::VectorRef;
use transfer_curate::{open_store, EmbeddingStore, Embeddings, Error, ItemRecord, Metric};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Unreachable = 4,
    DigestMismatch = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TcMetric {
    Euclidean = 0,
    Cosine = 1,
}

impl From<TcMetric> for Metric {
    fn from(m: TcMetric) -> Metric {
        match m {
            TcMetric::Euclidean => Metric::Euclidean,
            TcMetric::Cosine => Metric::Cosine,
        }
    }
}

/// An embedding store opened from disk or built from caller memory.
pub struct TcStore(EmbeddingStore);

/// The outcome of a query-balanced curation.
pub struct TcCuration(CurationResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TcStatus {
    match e {
        Error::Io { .. } | Error::Locked(_) => TcStatus::Io,
        Error::Unreachable { .. } => TcStatus::Unreachable,
        Error::DigestMismatch { .. } => TcStatus::DigestMismatch,
        _ => TcStatus::InvalidArgument,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TcStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            TcStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".to_owned());
            TcStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    // SAFETY: callers pass pointers obtained from this library or valid C objects.
    unsafe { p.as_ref() }.ok_or(Fail::Null(what))
}

/// # Safety
/// `p` must be null or point to `len` readable elements.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or point to `len` writable elements.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opens a store file (and its `.meta.jsonl` sidecar).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tc_store_open(path: *const c_char, out: *mut *mut TcStore) -> TcStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::invalid("path is not valid UTF-8"))?;
        let store = open_store(Path::new(path))?;
        *out = Box::into_raw(Box::new(TcStore(store)));
        Ok(())
    })
}

/// Builds an in-memory store from `count × dim` row-major floats. `ids` may
/// be null (ids become `0..count`); otherwise it holds `count` strictly
/// increasing ids.
///
/// # Safety
/// `rows` must hold `count * dim` floats, `ids` null or `count` ids; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tc_store_from_rows(
    rows: *const f32,
    count: usize,
    dim: usize,
    ids: *const u64,
    normalized: bool,
    out: *mut *mut TcStore,
) -> TcStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let len = count.checked_mul(dim).ok_or_else(|| Error::invalid("count * dim overflows"))?;
        let data = slice(rows, len, "rows")?.to_vec();
        let ids: Vec<u64> = if ids.is_null() {
            (0..count as u64).collect()
        } else {
            slice(ids, count, "ids")?.to_vec()
        };
        let records = ids
            .iter()
            .map(|&id| ItemRecord::whole_image(id, id.to_string(), "gallery"))
            .collect();
        let store = EmbeddingStore::from_parts(records, data, dim, normalized, "ffi")?;
        *out = Box::into_raw(Box::new(TcStore(store)));
        Ok(())
    })
}

/// Releases a store; null is ignored.
///
/// # Safety
/// `store` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tc_store_free(store: *mut TcStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Number of rows, or 0 for null.
///
/// # Safety
/// `store` must be null or a live store handle.
#[no_mangle]
pub unsafe extern "C" fn tc_store_count(store: *const TcStore) -> usize {
    store.as_ref().map_or(0, |s| s.0.count())
}

/// Row width, or 0 for null.
///
/// # Safety
/// `store` must be null or a live store handle.
#[no_mangle]
pub unsafe extern "C" fn tc_store_dim(store: *const TcStore) -> usize {
    store.as_ref().map_or(0, |s| s.0.dim())
}

/// Copies row `row` into `out`, which must hold `tc_store_dim` floats.
///
/// # Safety
/// `store` must be a live handle; `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn tc_store_row(store: *const TcStore, row: usize, out: *mut f32, len: usize) -> TcStatus {
    guard(|| {
        let s = &non_null(store, "store")?.0;
        if row >= s.count() {
            return Err(Error::invalid(format!("row {row} out of range (count {})", s.count())).into());
        }
        if len != s.dim() {
            return Err(Error::DimMismatch {
                expected: s.dim(),
                found: len,
            }
            .into());
        }
        slice_mut(out, len, "out")?.copy_from_slice(s.row(row));
        Ok(())
    })
}

/// Item id of row `row`.
///
/// # Safety
/// `store` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tc_store_item_id(store: *const TcStore, row: usize, out: *mut u64) -> TcStatus {
    guard(|| {
        let s = &non_null(store, "store")?.0;
        if row >= s.count() {
            return Err(Error::invalid(format!("row {row} out of range (count {})", s.count())).into());
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = s.item_id(row);
        Ok(())
    })
}

/// The `k` nearest gallery items to one query vector of length `dim`, best
/// first. `out_scores` may be null.
///
/// # Safety
/// `query` must hold `dim` floats, `out_ids` (and `out_scores` if non-null) `k` elements.
#[no_mangle]
pub unsafe extern "C" fn tc_top_k(
    gallery: *const TcStore,
    query: *const f32,
    dim: usize,
    k: usize,
    metric: TcMetric,
    out_ids: *mut u64,
    out_scores: *mut f64,
) -> TcStatus {
    guard(|| {
        let g = &non_null(gallery, "gallery")?.0;
        let q = slice(query, dim, "query")?;
        let ids = slice_mut(out_ids, k, "out_ids")?;
        let list = top_k(u64::MAX, VectorRef::Single(q), Embeddings::Single(g), k, metric.into(), &SearchOptions::default())?;
        for (slot, nb) in ids.iter_mut().zip(&list.neighbors) {
            *slot = nb.item_id;
        }
        if !out_scores.is_null() {
            for (slot, nb) in slice_mut(out_scores, k, "out_scores")?.iter_mut().zip(&list.neighbors) {
                *slot = nb.score;
            }
        }
        Ok(())
    })
}

/// Query-balanced selection of `n` gallery items.
///
/// # Safety
/// Both stores must be live handles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tc_curate_query_balanced(
    queries: *const TcStore,
    gallery: *const TcStore,
    n: usize,
    seed: u64,
    metric: TcMetric,
    out: *mut *mut TcCuration,
) -> TcStatus {
    guard(|| {
        let q = &non_null(queries, "queries")?.0;
        let g = &non_null(gallery, "gallery")?.0;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let req = CurationRequest::new(n, Strategy::QueryBalanced, metric.into(), seed);
        let result = query_balanced_select(Embeddings::Single(q), Embeddings::Single(g), &req)?;
        *out = Box::into_raw(Box::new(TcCuration(result)));
        Ok(())
    })
}

/// Number of selected items, or 0 for null.
///
/// # Safety
/// `c` must be null or a live curation handle.
#[no_mangle]
pub unsafe extern "C" fn tc_curation_len(c: *const TcCuration) -> usize {
    c.as_ref().map_or(0, |c| c.0.selected.len())
}

/// Final neighbor depth, or 0 for null.
///
/// # Safety
/// `c` must be null or a live curation handle.
#[no_mangle]
pub unsafe extern "C" fn tc_curation_k_final(c: *const TcCuration) -> usize {
    c.as_ref().map_or(0, |c| c.0.k_final)
}

/// Copies the selected ids (ordered by best rank, then id); `len` must equal `tc_curation_len`.
///
/// # Safety
/// `c` must be a live handle and `out` hold `len` ids.
#[no_mangle]
pub unsafe extern "C" fn tc_curation_ids(c: *const TcCuration, out: *mut u64, len: usize) -> TcStatus {
    guard(|| {
        let c = &non_null(c, "curation")?.0;
        if len != c.selected.len() {
            return Err(Error::invalid(format!("buffer holds {len} ids, result has {}", c.selected.len())).into());
        }
        slice_mut(out, len, "out")?.copy_from_slice(&c.selected);
        Ok(())
    })
}

/// Releases a curation result; null is ignored.
///
/// # Safety
/// `c` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tc_curation_free(c: *mut TcCuration) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

fn write_loss(out: LossOutput<ndarray::Ix2>, loss: *mut f64, grad: *mut f64) -> Result<(), Fail> {
    if loss.is_null() {
        return Err(Fail::Null("loss"));
    }
    // SAFETY: checked non-null; the caller sized `grad` like the input.
    unsafe {
        *loss = out.loss;
        if !grad.is_null() {
            let g = slice_mut(grad, out.grad.len(), "grad")?;
            for (slot, v) in g.iter_mut().zip(out.grad.iter()) {
                *slot = *v;
            }
        }
    }
    Ok(())
}

unsafe fn matrix<'a>(p: *const f64, rows: usize, cols: usize, what: &'static str) -> Result<ArrayView2<'a, f64>, Fail> {
    let len = rows.checked_mul(cols).ok_or_else(|| Error::invalid("shape overflows"))?;
    let data = slice(p, len, what)?;
    Ok(ArrayView2::from_shape((rows, cols), data).expect("length matches shape"))
}

/// Temperature-scaled KD loss on `batch × classes` logits; `grad` (nullable)
/// receives d loss / d student.
///
/// # Safety
/// `student`, `teacher` and non-null `grad` hold `batch * classes` doubles; `loss` writable.
#[no_mangle]
pub unsafe extern "C" fn tc_kd_kl_loss(
    student: *const f64,
    teacher: *const f64,
    batch: usize,
    classes: usize,
    temperature: f64,
    loss: *mut f64,
    grad: *mut f64,
) -> TcStatus {
    guard(|| {
        let s = matrix(student, batch, classes, "student")?;
        let t = matrix(teacher, batch, classes, "teacher")?;
        write_loss(kd_kl_loss(s, t, temperature)?, loss, grad)
    })
}

/// Mean cross entropy of `batch × classes` logits against `labels`.
///
/// # Safety
/// `logits` and non-null `grad` hold `batch * classes` doubles, `labels` `batch` entries.
#[no_mangle]
pub unsafe extern "C" fn tc_cross_entropy(
    logits: *const f64,
    labels: *const usize,
    batch: usize,
    classes: usize,
    loss: *mut f64,
    grad: *mut f64,
) -> TcStatus {
    guard(|| {
        let x = matrix(logits, batch, classes, "logits")?;
        let y = slice(labels, batch, "labels")?;
        write_loss(cross_entropy(x, y)?, loss, grad)
    })
}

/// Symmetric InfoNCE between unit-norm `batch × dim` student and teacher
/// embeddings; `grad` is with respect to the student rows.
///
/// # Safety
/// `student`, `teacher` and non-null `grad` hold `batch * dim` doubles; `loss` writable.
#[no_mangle]
pub unsafe extern "C" fn tc_info_nce(
    student: *const f64,
    teacher: *const f64,
    batch: usize,
    dim: usize,
    temperature: f64,
    loss: *mut f64,
    grad: *mut f64,
) -> TcStatus {
    guard(|| {
        let s = matrix(student, batch, dim, "student")?;
        let t = matrix(teacher, batch, dim, "teacher")?;
        write_loss(info_nce_contrastive(s, t, temperature)?, loss, grad)
    })
}
