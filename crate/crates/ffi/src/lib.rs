//! C ABI over the unlearn-forge core.
//!
//! Objects cross the boundary as opaque handles created by `uf_*_new`/`uf_*_load` and
//! released with the matching `uf_*_free`. Every fallible call returns a [`UfStatus`];
//! on failure the message is kept per thread and read back with
//! [`uf_last_error_message`]. Point sets are flat `x0, y0, x1, y1, ...` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use unlearn_forge::concepts::ConceptTable;
use unlearn_forge::diffusion::{sample, ModelSnapshot};
use unlearn_forge::doco::surgery;
use unlearn_forge::eval::{fit_gaussian, frechet_distance, mmd};
use unlearn_forge::numgrad::FlatGrad;
use unlearn_forge::Error;

/// Result of every fallible call. The non-zero codes 2-4 match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UfStatus {
    Ok = 0,
    Failed = 1,
    Config = 2,
    MissingArtifact = 3,
    Numeric = 4,
    HashMismatch = 5,
    NullPointer = 6,
    InvalidArgument = 7,
    Panic = 8,
}

/// A concept table.
pub struct UfTable {
    inner: ConceptTable,
}

/// A trained denoiser with its noise schedule.
pub struct UfSnapshot {
    inner: ModelSnapshot,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> UfStatus {
    match e {
        Error::Config(_) => UfStatus::Config,
        Error::MissingArtifact { .. } => UfStatus::MissingArtifact,
        Error::Numeric { .. } => UfStatus::Numeric,
        Error::HashMismatch { .. } => UfStatus::HashMismatch,
        _ => UfStatus::Failed,
    }
}

struct Fail(UfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(UfStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(UfStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> UfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            UfStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            UfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn points_arg(p: *const f64, n: usize, what: &str) -> Result<Vec<[f64; 2]>, Fail> {
    let flat = slice_arg(p, 2 * n, what)?;
    Ok(flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
}

/// Copies `s` into `buf` as a NUL-terminated string, truncating if needed. Returns the
/// buffer size needed for the whole string including the terminator.
unsafe fn copy_out(s: &str, buf: *mut c_char, len: usize) -> usize {
    if !buf.is_null() && len > 0 {
        let n = s.len().min(len - 1);
        std::ptr::copy_nonoverlapping(s.as_ptr() as *const c_char, buf, n);
        *buf.add(n) = 0;
    }
    s.len() + 1
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn uf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failed call on this thread (empty after a success). Returns the
/// buffer size needed; pass `buf = NULL` to query it.
///
/// # Safety
/// `buf` must be NULL or point to at least `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn uf_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| copy_out(&e.borrow(), buf, len))
}

/// The default five-concept table for embedding seed `seed`.
///
/// # Safety
/// `out` must be a valid pointer; on success it receives a handle to free with
/// [`uf_table_free`].
#[no_mangle]
pub unsafe extern "C" fn uf_table_default(seed: u64, out: *mut *mut UfTable) -> UfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = ConceptTable::default_table(seed);
        *out = Box::into_raw(Box::new(UfTable { inner }));
        Ok(())
    })
}

/// Parses and validates a table from its JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn uf_table_from_json(
    json: *const c_char,
    out: *mut *mut UfTable,
) -> UfStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let out = out_arg(out, "out")?;
        let inner = ConceptTable::from_json(text)?;
        *out = Box::into_raw(Box::new(UfTable { inner }));
        Ok(())
    })
}

/// # Safety
/// `table` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn uf_table_free(table: *mut UfTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Number of concepts, or 0 for a NULL handle.
///
/// # Safety
/// `table` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn uf_table_len(table: *const UfTable) -> usize {
    table.as_ref().map_or(0, |t| t.inner.concepts.len())
}

/// Writes the id of concept `index` into `buf`; `needed` receives the size including the
/// terminator.
///
/// # Safety
/// `table` must be a live handle, `buf` NULL or `len` writable bytes, `needed` NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn uf_table_concept_id(
    table: *const UfTable,
    index: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> UfStatus {
    guard(|| {
        let t = &ref_arg(table, "table")?.inner;
        let c = t.concepts.get(index).ok_or_else(|| {
            invalid(format!(
                "concept index {index} out of range ({} concepts)",
                t.concepts.len()
            ))
        })?;
        let n = copy_out(&c.id, buf, len);
        if let Some(needed) = needed.as_mut() {
            *needed = n;
        }
        Ok(())
    })
}

/// Index of a concept id, through `out_index`.
///
/// # Safety
/// `table` must be a live handle, `id` a NUL-terminated string, `out_index` valid.
#[no_mangle]
pub unsafe extern "C" fn uf_table_index_of(
    table: *const UfTable,
    id: *const c_char,
    out_index: *mut usize,
) -> UfStatus {
    guard(|| {
        let t = &ref_arg(table, "table")?.inner;
        let id = str_arg(id, "id")?;
        let out = out_arg(out_index, "out_index")?;
        *out = t
            .index_of(id)
            .ok_or_else(|| invalid(format!("unknown concept `{id}`")))?;
        Ok(())
    })
}

/// Table index of the Bayes class of each of the `n` points.
///
/// # Safety
/// `table` must be a live handle, `points` hold `2 n` values and `out` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn uf_table_classify(
    table: *const UfTable,
    points: *const f64,
    n: usize,
    out: *mut usize,
) -> UfStatus {
    guard(|| {
        let t = &ref_arg(table, "table")?.inner;
        let pts = points_arg(points, n, "points")?;
        if n > 0 && out.is_null() {
            return Err(null("out"));
        }
        for (i, p) in pts.into_iter().enumerate() {
            *out.add(i) = t.bayes_classify_index(p);
        }
        Ok(())
    })
}

/// Loads a checkpoint and its sidecar, checking them against `table`.
///
/// # Safety
/// `path` must be a NUL-terminated string, `table` a live handle, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn uf_snapshot_load(
    path: *const c_char,
    table: *const UfTable,
    out: *mut *mut UfSnapshot,
) -> UfStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let t = &ref_arg(table, "table")?.inner;
        let out = out_arg(out, "out")?;
        let inner = ModelSnapshot::load(Path::new(path), t)?;
        *out = Box::into_raw(Box::new(UfSnapshot { inner }));
        Ok(())
    })
}

/// # Safety
/// `snapshot` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn uf_snapshot_free(snapshot: *mut UfSnapshot) {
    if !snapshot.is_null() {
        drop(Box::from_raw(snapshot));
    }
}

/// Content id of the snapshot's parameters (16 hex digits).
///
/// # Safety
/// `snapshot` must be a live handle, `buf` NULL or `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn uf_snapshot_id(
    snapshot: *const UfSnapshot,
    buf: *mut c_char,
    len: usize,
) -> UfStatus {
    guard(|| {
        let s = &ref_arg(snapshot, "snapshot")?.inner;
        copy_out(&s.id(), buf, len);
        Ok(())
    })
}

/// Draws `n` points from the model under the embedding of concept `concept`, writing
/// `2 n` values to `out`.
///
/// # Safety
/// Handles must be live and `out` must have room for `2 n` doubles.
#[no_mangle]
pub unsafe extern "C" fn uf_snapshot_sample(
    snapshot: *const UfSnapshot,
    table: *const UfTable,
    concept: usize,
    n: usize,
    seed: u64,
    out: *mut f64,
) -> UfStatus {
    guard(|| {
        let s = &ref_arg(snapshot, "snapshot")?.inner;
        let t = &ref_arg(table, "table")?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        let c = t
            .concepts
            .get(concept)
            .ok_or_else(|| invalid(format!("concept index {concept} out of range")))?;
        let set = sample(&s.net, &c.embedding, &c.id, n, &s.schedule, seed, &s.id())?;
        for (i, p) in set.points.iter().enumerate() {
            *out.add(2 * i) = p[0];
            *out.add(2 * i + 1) = p[1];
        }
        Ok(())
    })
}

/// Concept-preserving projection of `gu` against `gr` (both of length `len`) into `out`.
///
/// # Safety
/// All three arrays must hold `len` doubles; `out` may not alias the inputs.
#[no_mangle]
pub unsafe extern "C" fn uf_surgery(
    gu: *const f64,
    gr: *const f64,
    len: usize,
    lambda: f64,
    out: *mut f64,
) -> UfStatus {
    guard(|| {
        let gu = FlatGrad::new(slice_arg(gu, len, "gu")?.to_vec(), 0);
        let gr = FlatGrad::new(slice_arg(gr, len, "gr")?.to_vec(), 0);
        if len > 0 && out.is_null() {
            return Err(null("out"));
        }
        let g = surgery(&gu, &gr, lambda)?;
        if len > 0 {
            std::ptr::copy_nonoverlapping(g.values.as_ptr(), out, len);
        }
        Ok(())
    })
}

/// Fréchet distance between Gaussian fits of two point sets (each at least 3 points).
///
/// # Safety
/// `a` must hold `2 na` doubles, `b` `2 nb`, and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn uf_frechet(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    out: *mut f64,
) -> UfStatus {
    guard(|| {
        let (a, b) = (points_arg(a, na, "a")?, points_arg(b, nb, "b")?);
        let out = out_arg(out, "out")?;
        *out = frechet_distance(&fit_gaussian(&a)?, &fit_gaussian(&b)?)?;
        Ok(())
    })
}

/// Gaussian-kernel MMD between two point sets. `bandwidth <= 0` selects the median
/// heuristic.
///
/// # Safety
/// `a` must hold `2 na` doubles, `b` `2 nb`, and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn uf_mmd(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    bandwidth: f64,
    out: *mut f64,
) -> UfStatus {
    guard(|| {
        let (a, b) = (points_arg(a, na, "a")?, points_arg(b, nb, "b")?);
        let out = out_arg(out, "out")?;
        let bw = (bandwidth > 0.0).then_some(bandwidth);
        *out = mmd(&a, &b, bw)?;
        Ok(())
    })
}
