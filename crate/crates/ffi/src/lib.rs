//! C ABI for the m2ae library.
//!
//! Objects cross the boundary as opaque handles created by `*_load`,
//! `*_generate` or the pipeline calls and released with the matching
//! `*_free`. Every fallible call returns an [`M2aeStatus`]; on failure the
//! message is available from [`m2ae_last_error_message`] on the same thread.
//! Panics never unwind into the caller and are reported as
//! `M2AE_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use m2ae::config::RunConfig;
use m2ae::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelParams};
use m2ae::probe::{self, extract_fingerprints, reconstruct_cross, Direction, FingerprintSet, Setting, Source};
use m2ae::signals::{generate_dataset, load_dataset, save_dataset, split_by_subject, Dataset};
use m2ae::training::pretrain;
use m2ae::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum M2aeStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// An argument or configuration value was rejected.
    InvalidInput = 3,
    Io = 4,
    /// A dataset or checkpoint file is malformed.
    Format = 5,
    /// The model lacks an encoder or decoder the call needs.
    ModalityMismatch = 6,
    NonFinite = 7,
    /// An output buffer is shorter than the data to copy.
    BufferTooSmall = 8,
    Internal = 9,
}

/// Values accepted by the `source` argument of
/// [`m2ae_extract_fingerprints`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum M2aeSource {
    Ecg = 0,
    Ppg = 1,
    Paired = 2,
}

/// Values accepted by the `direction` argument of
/// [`m2ae_reconstruct_mae`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum M2aeDirection {
    EcgToPpg = 0,
    PpgToEcg = 1,
}

/// Paired ECG/PPG segments.
pub struct M2aeDataset {
    inner: Dataset,
}

/// Model parameters loaded from or written to a checkpoint.
pub struct M2aeModel {
    inner: ModelParams,
}

/// Fingerprints keyed by subject and segment.
pub struct M2aeFingerprints {
    inner: FingerprintSet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: M2aeStatus,
    message: String,
}

impl Failure {
    fn new(status: M2aeStatus, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) => M2aeStatus::Io,
            Error::BadMagic { .. } | Error::VersionMismatch { .. } | Error::TruncatedFile(_) | Error::Malformed(_) => {
                M2aeStatus::Format
            }
            Error::ModalityMismatch(_) => M2aeStatus::ModalityMismatch,
            Error::NonFinite { .. } | Error::NonFiniteData { .. } | Error::NonFiniteLoss { .. } => {
                M2aeStatus::NonFinite
            }
            other if other.is_input_error() => M2aeStatus::InvalidInput,
            _ => M2aeStatus::Internal,
        };
        Self::new(status, e.to_string())
    }
}

fn set_last_error(message: Option<String>) {
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = message.map(|m| CString::new(m.replace('\0', " ")).expect("interior nul removed"));
    });
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> M2aeStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|panic| {
        let detail = panic
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| panic.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        Err(Failure::new(M2aeStatus::Internal, format!("panic: {detail}")))
    });
    match outcome {
        Ok(()) => {
            set_last_error(None);
            M2aeStatus::Ok
        }
        Err(f) => {
            set_last_error(Some(f.message));
            f.status
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: the caller passes either null or a pointer to a live `T`.
    unsafe { p.as_ref() }.ok_or_else(|| Failure::new(M2aeStatus::NullArgument, format!("{what} is null")))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(M2aeStatus::NullArgument, format!("{what} is null")));
    }
    // SAFETY: non-null and NUL-terminated per the caller contract.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure::new(M2aeStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::new(M2aeStatus::NullArgument, "output pointer is null"));
    }
    // SAFETY: `out` is non-null and writable per the caller contract.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::new(M2aeStatus::NullArgument, "output pointer is null"));
    }
    // SAFETY: as for `store`.
    unsafe { *out = value };
    Ok(())
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        // SAFETY: `p` came from `Box::into_raw` in this crate and is freed once.
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn m2ae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null after a
/// successful call. The pointer stays valid until the next call into the
/// library on this thread.
#[no_mangle]
pub extern "C" fn m2ae_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Synthesizes `subjects × pairs_per_subject` paired segments.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn m2ae_dataset_generate(
    subjects: u32,
    pairs_per_subject: u32,
    seed: u64,
    out: *mut *mut M2aeDataset,
) -> M2aeStatus {
    guard(|| {
        let inner = generate_dataset(subjects, pairs_per_subject, seed)?;
        unsafe { store(out, M2aeDataset { inner }) }
    })
}

/// Reads a dataset file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn m2ae_dataset_load(path: *const c_char, out: *mut *mut M2aeDataset) -> M2aeStatus {
    guard(|| {
        let path = unsafe { string(path, "path") }?;
        let inner = load_dataset(path)?;
        unsafe { store(out, M2aeDataset { inner }) }
    })
}

/// Writes a dataset file.
///
/// # Safety
/// `dataset` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn m2ae_dataset_save(dataset: *const M2aeDataset, path: *const c_char) -> M2aeStatus {
    guard(|| {
        let ds = unsafe { deref(dataset, "dataset") }?;
        let path = unsafe { string(path, "path") }?;
        save_dataset(&ds.inner, path)?;
        Ok(())
    })
}

/// Number of pairs, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn m2ae_dataset_len(dataset: *const M2aeDataset) -> usize {
    unsafe { dataset.as_ref() }.map_or(0, |d| d.inner.len())
}

/// Samples per segment, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn m2ae_dataset_segment_len(dataset: *const M2aeDataset) -> usize {
    unsafe { dataset.as_ref() }.map_or(0, |d| d.inner.segment_len)
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn m2ae_dataset_free(dataset: *mut M2aeDataset) {
    unsafe { release(dataset) }
}

/// Loads the model parameters of a checkpoint; training state is dropped.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn m2ae_model_load(path: *const c_char, out: *mut *mut M2aeModel) -> M2aeStatus {
    guard(|| {
        let path = unsafe { string(path, "path") }?;
        let inner = load_checkpoint(path)?.params;
        unsafe { store(out, M2aeModel { inner }) }
    })
}

/// Writes the model as a parameters-only checkpoint.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn m2ae_model_save(model: *const M2aeModel, path: *const c_char) -> M2aeStatus {
    guard(|| {
        let m = unsafe { deref(model, "model") }?;
        let path = unsafe { string(path, "path") }?;
        save_checkpoint(&Checkpoint::new(m.inner.clone()), path)?;
        Ok(())
    })
}

/// Fingerprint width, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn m2ae_model_d_enc(model: *const M2aeModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.inner.config().d_enc)
}

/// True when the model holds both modalities.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn m2ae_model_is_cross_modal(model: *const M2aeModel) -> bool {
    unsafe { model.as_ref() }.is_some_and(|m| m.inner.is_cross_modal())
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn m2ae_model_free(model: *mut M2aeModel) {
    unsafe { release(model) }
}

/// Splits `dataset` by subject and pretrains a model. `config` holds run
/// config text (`key = value` lines) or is null for defaults. With a
/// non-null `out_dir`, the metrics log and checkpoints are written there.
/// `out` receives the parameters with the lowest validation loss.
///
/// # Safety
/// `dataset` must be a live handle, `config` and `out_dir` null or
/// NUL-terminated strings, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn m2ae_pretrain(
    dataset: *const M2aeDataset,
    config: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut M2aeModel,
) -> M2aeStatus {
    guard(|| {
        let ds = unsafe { deref(dataset, "dataset") }?;
        let cfg = if config.is_null() {
            RunConfig::default()
        } else {
            RunConfig::parse(unsafe { string(config, "config") }?)?
        };
        let dir = if out_dir.is_null() { None } else { Some(PathBuf::from(unsafe { string(out_dir, "out_dir") }?)) };
        let split = split_by_subject(&ds.inner, cfg.split, cfg.split_seed)?;
        let result = pretrain(&split, &cfg.model, &cfg.train, &cfg.loss, &cfg.augment, dir.as_deref())?;
        unsafe { store(out, M2aeModel { inner: result.best }) }
    })
}

/// Frozen-encoder fingerprints of every pair. `source` takes an
/// [`M2aeSource`] value.
///
/// # Safety
/// `model` and `dataset` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn m2ae_extract_fingerprints(
    model: *const M2aeModel,
    dataset: *const M2aeDataset,
    source: u32,
    out: *mut *mut M2aeFingerprints,
) -> M2aeStatus {
    guard(|| {
        let m = unsafe { deref(model, "model") }?;
        let ds = unsafe { deref(dataset, "dataset") }?;
        let source = match source {
            0 => Source::Ecg,
            1 => Source::Ppg,
            2 => Source::Paired,
            other => return Err(Failure::new(M2aeStatus::InvalidInput, format!("unknown source {other}"))),
        };
        let inner = extract_fingerprints(&m.inner, &ds.inner.pairs, source)?;
        unsafe { store(out, M2aeFingerprints { inner }) }
    })
}

/// Number of fingerprint rows, or 0 for a null handle.
///
/// # Safety
/// `fingerprints` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn m2ae_fingerprints_rows(fingerprints: *const M2aeFingerprints) -> usize {
    unsafe { fingerprints.as_ref() }.map_or(0, |f| f.inner.len())
}

/// Values per row, or 0 for a null handle.
///
/// # Safety
/// `fingerprints` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn m2ae_fingerprints_dim(fingerprints: *const M2aeFingerprints) -> usize {
    unsafe { fingerprints.as_ref() }.map_or(0, |f| f.inner.d_enc())
}

/// Copies all fingerprints row-major into `buffer`, which must hold at
/// least `rows × dim` values.
///
/// # Safety
/// `fingerprints` must be a live handle and `buffer` valid for `len`
/// writes.
#[no_mangle]
pub unsafe extern "C" fn m2ae_fingerprints_copy(
    fingerprints: *const M2aeFingerprints,
    buffer: *mut f64,
    len: usize,
) -> M2aeStatus {
    guard(|| {
        let f = unsafe { deref(fingerprints, "fingerprints") }?;
        let needed = f.inner.len() * f.inner.d_enc();
        if len < needed {
            return Err(Failure::new(M2aeStatus::BufferTooSmall, format!("buffer holds {len} values, need {needed}")));
        }
        if buffer.is_null() {
            return Err(Failure::new(M2aeStatus::NullArgument, "buffer is null"));
        }
        // SAFETY: `buffer` is non-null and valid for `len >= needed` writes.
        let dst = unsafe { std::slice::from_raw_parts_mut(buffer, needed) };
        for (chunk, row) in dst.chunks_mut(f.inner.d_enc().max(1)).zip(f.inner.rows()) {
            chunk.copy_from_slice(&row.values);
        }
        Ok(())
    })
}

/// Subject id and segment index of one row.
///
/// # Safety
/// `fingerprints` must be a live handle and both outputs writable.
#[no_mangle]
pub unsafe extern "C" fn m2ae_fingerprints_key(
    fingerprints: *const M2aeFingerprints,
    row: usize,
    subject_id: *mut u32,
    segment_index: *mut u32,
) -> M2aeStatus {
    guard(|| {
        let f = unsafe { deref(fingerprints, "fingerprints") }?;
        let r = f
            .inner
            .rows()
            .get(row)
            .ok_or_else(|| Failure::new(M2aeStatus::InvalidInput, format!("row {row} out of range")))?;
        unsafe { write_out(subject_id, r.subject_id) }?;
        unsafe { write_out(segment_index, r.segment_index) }
    })
}

/// Writes the fingerprint CSV.
///
/// # Safety
/// `fingerprints` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn m2ae_fingerprints_write_csv(
    fingerprints: *const M2aeFingerprints,
    path: *const c_char,
) -> M2aeStatus {
    guard(|| {
        let f = unsafe { deref(fingerprints, "fingerprints") }?;
        let path = unsafe { string(path, "path") }?;
        std::fs::write(path, f.inner.to_csv()).map_err(Error::from)?;
        Ok(())
    })
}

/// # Safety
/// `fingerprints` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn m2ae_fingerprints_free(fingerprints: *mut M2aeFingerprints) {
    unsafe { release(fingerprints) }
}

/// Mean absolute error of fully frozen cross-modal reconstruction over every
/// pair. `direction` takes an [`M2aeDirection`] value.
///
/// # Safety
/// `model` and `dataset` must be live handles and `mae` writable.
#[no_mangle]
pub unsafe extern "C" fn m2ae_reconstruct_mae(
    model: *const M2aeModel,
    dataset: *const M2aeDataset,
    direction: u32,
    mae: *mut f64,
) -> M2aeStatus {
    guard(|| {
        let m = unsafe { deref(model, "model") }?;
        let ds = unsafe { deref(dataset, "dataset") }?;
        let direction = match direction {
            0 => Direction::EcgToPpg,
            1 => Direction::PpgToEcg,
            other => return Err(Failure::new(M2aeStatus::InvalidInput, format!("unknown direction {other}"))),
        };
        let r = reconstruct_cross(&m.inner, &ds.inner.pairs, direction, Setting::Frozen, None)?;
        unsafe { write_out(mae, r.mae) }
    })
}

unsafe fn ranking_inputs<'a>(
    scores: *const f64,
    labels: *const u8,
    n: usize,
) -> Result<(&'a [f64], Vec<bool>), Failure> {
    if scores.is_null() || labels.is_null() {
        return Err(Failure::new(M2aeStatus::NullArgument, "scores or labels is null"));
    }
    // SAFETY: both arrays are non-null and hold `n` elements per the caller contract.
    let (s, l) = unsafe { (std::slice::from_raw_parts(scores, n), std::slice::from_raw_parts(labels, n)) };
    Ok((s, l.iter().map(|&v| v != 0).collect()))
}

/// Area under the ROC curve of `n` scores against 0/1 labels.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn m2ae_auroc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> M2aeStatus {
    guard(|| {
        let (s, l) = unsafe { ranking_inputs(scores, labels, n) }?;
        unsafe { write_out(out, probe::auroc(s, &l)?) }
    })
}

/// Area under the precision-recall step curve of `n` scores against 0/1
/// labels.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn m2ae_auprc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> M2aeStatus {
    guard(|| {
        let (s, l) = unsafe { ranking_inputs(scores, labels, n) }?;
        unsafe { write_out(out, probe::auprc(s, &l)?) }
    })
}
