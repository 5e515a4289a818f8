//! C interface over dataset generation, training, evaluation, and run
//! persistence. Every entry point returns a [`PtaStatus`]; on failure the
//! thread-local message behind [`pta_last_error`] describes what went wrong.
//! Handles are opaque pointers owned by the caller and released with the
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use pta_core::data_synth::{generate_dataset, SyntheticDataset};
use pta_core::model_core::ModelSpecs;
use pta_core::trainer::{build_specs, evaluate_subset, train, ExperimentConfig, TrainState};
use pta_core::PtaError;

/// Result of any C-visible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PtaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    InvalidConfig = 4,
    ShapeMismatch = 5,
    NotFound = 6,
    NumericError = 7,
    CorruptArtifact = 8,
    IoError = 9,
    JsonError = 10,
    RenderError = 11,
    Panic = 12,
}

/// Opaque dataset handle.
#[repr(C)]
pub struct PtaDataset {
    _private: [u8; 0],
}

/// Opaque trained-run handle.
#[repr(C)]
pub struct PtaRun {
    _private: [u8; 0],
}

struct DatasetInner {
    dataset: SyntheticDataset,
}

struct RunInner {
    state: TrainState,
    specs: ModelSpecs,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: Vec<u8> = msg.bytes().filter(|&b| b != 0).collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).expect("NUL bytes stripped");
    });
}

fn status_of(err: &PtaError) -> PtaStatus {
    match err {
        PtaError::InvalidArgument(_) => PtaStatus::InvalidArgument,
        PtaError::InvalidConfig(_) => PtaStatus::InvalidConfig,
        PtaError::ShapeMismatch(_) => PtaStatus::ShapeMismatch,
        PtaError::NotFound(_) => PtaStatus::NotFound,
        PtaError::Numeric(_) => PtaStatus::NumericError,
        PtaError::CorruptArtifact(_) => PtaStatus::CorruptArtifact,
        PtaError::Io(_) => PtaStatus::IoError,
        PtaError::Json(_) => PtaStatus::JsonError,
        PtaError::Render(_) => PtaStatus::RenderError,
    }
}

fn fail(err: PtaError) -> PtaStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

/// Runs a fallible body, trapping panics so they never unwind across the
/// C boundary.
fn guarded<F: FnOnce() -> PtaStatus>(body: F) -> PtaStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic in library call".to_string());
            set_error(&msg);
            PtaStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string valid for reads.
unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, PtaStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(PtaStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        PtaStatus::InvalidUtf8
    })
}

fn parse_experiment(text: &str) -> Result<ExperimentConfig, PtaStatus> {
    serde_json::from_str(text).map_err(|e| fail(PtaError::Json(e)))
}

unsafe fn dataset_ref<'a>(ptr: *const PtaDataset) -> Result<&'a DatasetInner, PtaStatus> {
    if ptr.is_null() {
        set_error("null dataset handle");
        return Err(PtaStatus::NullPointer);
    }
    Ok(&*(ptr as *const DatasetInner))
}

unsafe fn run_ref<'a>(ptr: *const PtaRun) -> Result<&'a RunInner, PtaStatus> {
    if ptr.is_null() {
        set_error("null run handle");
        return Err(PtaStatus::NullPointer);
    }
    Ok(&*(ptr as *const RunInner))
}

/// Returns the library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pta_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Returns the message for the most recent failure on this thread. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pta_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Generates a dataset from an experiment-config JSON string and stores the
/// new handle in `out`.
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string and `out` a valid
/// pointer; the returned handle must be released with [`pta_dataset_free`].
#[no_mangle]
pub unsafe extern "C" fn pta_dataset_generate(
    config_json: *const c_char,
    out: *mut *mut PtaDataset,
) -> PtaStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null output pointer");
            return PtaStatus::NullPointer;
        }
        let text = match read_str(config_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let config = match parse_experiment(text) {
            Ok(c) => c,
            Err(s) => return s,
        };
        match generate_dataset(&config.data) {
            Ok(dataset) => {
                let inner = Box::new(DatasetInner { dataset });
                *out = Box::into_raw(inner) as *mut PtaDataset;
                PtaStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Releases a dataset handle. Null is a no-op.
///
/// # Safety
/// `ptr` must be null or a handle from [`pta_dataset_generate`], released
/// at most once.
#[no_mangle]
pub unsafe extern "C" fn pta_dataset_free(ptr: *mut PtaDataset) {
    if !ptr.is_null() {
        drop(Box::from_raw(ptr as *mut DatasetInner));
    }
}

/// Writes the train/val/test sample counts of a dataset.
///
/// # Safety
/// All pointers must be valid; `ptr` must be a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn pta_dataset_sizes(
    ptr: *const PtaDataset,
    train: *mut usize,
    val: *mut usize,
    test: *mut usize,
) -> PtaStatus {
    guarded(|| {
        if train.is_null() || val.is_null() || test.is_null() {
            set_error("null output pointer");
            return PtaStatus::NullPointer;
        }
        match dataset_ref(ptr) {
            Ok(inner) => {
                *train = inner.dataset.train.len();
                *val = inner.dataset.val.len();
                *test = inner.dataset.test.len();
                PtaStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Trains a model to completion from an experiment-config JSON string under
/// the given seed, reusing `dataset` if non-null (it must have been generated
/// from the same data config) and regenerating it otherwise.
///
/// # Safety
/// `config_json` and `out` must be valid pointers; `dataset` must be null or
/// a live dataset handle. Release the result with [`pta_run_free`].
#[no_mangle]
pub unsafe extern "C" fn pta_train(
    config_json: *const c_char,
    seed: u64,
    dataset: *const PtaDataset,
    out: *mut *mut PtaRun,
) -> PtaStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null output pointer");
            return PtaStatus::NullPointer;
        }
        let text = match read_str(config_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let config = match parse_experiment(text) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let owned;
        let ds = if dataset.is_null() {
            owned = match generate_dataset(&config.data) {
                Ok(d) => d,
                Err(e) => return fail(e),
            };
            &owned
        } else {
            let inner = match dataset_ref(dataset) {
                Ok(i) => i,
                Err(s) => return s,
            };
            if inner.dataset.config != config.data {
                set_error("dataset handle was generated from a different data config");
                return PtaStatus::InvalidConfig;
            }
            &inner.dataset
        };
        let specs = match build_specs(&config, ds) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        match train(&config, ds, seed) {
            Ok(result) => {
                let inner = Box::new(RunInner { state: result.state, specs });
                *out = Box::into_raw(inner) as *mut PtaRun;
                PtaStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Releases a run handle. Null is a no-op.
///
/// # Safety
/// `ptr` must be null or a handle from [`pta_train`]/[`pta_run_load`],
/// released at most once.
#[no_mangle]
pub unsafe extern "C" fn pta_run_free(ptr: *mut PtaRun) {
    if !ptr.is_null() {
        drop(Box::from_raw(ptr as *mut RunInner));
    }
}

/// Serializes a run to the given file path (JSON).
///
/// # Safety
/// `run` must be a live run handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pta_run_save(run: *const PtaRun, path: *const c_char) -> PtaStatus {
    guarded(|| {
        let inner = match run_ref(run) {
            Ok(i) => i,
            Err(s) => return s,
        };
        let path = match read_str(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match inner.state.save(Path::new(path)) {
            Ok(()) => PtaStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Loads a run previously written by [`pta_run_save`].
///
/// # Safety
/// `path` and `out` must be valid pointers. Release the result with
/// [`pta_run_free`].
#[no_mangle]
pub unsafe extern "C" fn pta_run_load(path: *const c_char, out: *mut *mut PtaRun) -> PtaStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null output pointer");
            return PtaStatus::NullPointer;
        }
        let path = match read_str(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let state = match TrainState::load(Path::new(path)) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        let dataset = match generate_dataset(&state.config.data) {
            Ok(d) => d,
            Err(e) => return fail(e),
        };
        let specs = match build_specs(&state.config, &dataset) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        let inner = Box::new(RunInner { state, specs });
        *out = Box::into_raw(inner) as *mut PtaRun;
        PtaStatus::Ok
    })
}

/// Number of modalities the run was trained over.
///
/// # Safety
/// `run` must be a live run handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pta_run_n_modalities(
    run: *const PtaRun,
    out: *mut usize,
) -> PtaStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null output pointer");
            return PtaStatus::NullPointer;
        }
        match run_ref(run) {
            Ok(inner) => {
                *out = inner.specs.modality_order.len();
                PtaStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Writes the learned normalized fusion weights, in modality order, into a
/// caller-owned buffer of length `len` (which must equal the modality count).
///
/// # Safety
/// `run` must be a live run handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn pta_run_weights(
    run: *const PtaRun,
    out: *mut f64,
    len: usize,
) -> PtaStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null output pointer");
            return PtaStatus::NullPointer;
        }
        let inner = match run_ref(run) {
            Ok(i) => i,
            Err(s) => return s,
        };
        let weights = inner.state.meta.weights();
        if weights.len() != len {
            set_error("buffer length does not match modality count");
            return PtaStatus::ShapeMismatch;
        }
        for (i, w) in weights.iter().enumerate() {
            *out.add(i) = *w;
        }
        PtaStatus::Ok
    })
}

/// Evaluates a run on the test split of `dataset` over a comma-separated
/// modality subset, writing the task metric to `out`.
///
/// # Safety
/// `run` and `dataset` must be live handles; `subset` a valid NUL-terminated
/// string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pta_evaluate_subset(
    run: *const PtaRun,
    dataset: *const PtaDataset,
    subset: *const c_char,
    out: *mut f64,
) -> PtaStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null output pointer");
            return PtaStatus::NullPointer;
        }
        let inner = match run_ref(run) {
            Ok(i) => i,
            Err(s) => return s,
        };
        let ds = match dataset_ref(dataset) {
            Ok(d) => d,
            Err(s) => return s,
        };
        let subset = match read_str(subset) {
            Ok(s) => s,
            Err(s) => return s,
        };
        let names: Vec<String> = subset
            .split(',')
            .map(|m| m.trim().to_string())
            .filter(|m| !m.is_empty())
            .collect();
        match evaluate_subset(&inner.state, &inner.specs, &ds.dataset.test, &names) {
            Ok(value) => {
                *out = value;
                PtaStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
