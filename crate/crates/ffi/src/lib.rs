//! C ABI over the prognosis library.
//!
//! Every function returns a [`PrognosisStatus`]; results are written through
//! out-pointers. Strings returned to the caller are NUL-terminated UTF-8 JSON
//! owned by the library and must be released with [`prognosis_string_free`].
//! After a non-OK status, [`prognosis_last_error`] describes the failure on the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use prognosis::config::PipelineConfig;
use prognosis::embedding::{Embedder, HashEmbedder};
use prognosis::eval::{confusion_matrix, enneking_label, lefs_band, macro_f1, unify_lefs, AblationVariant};
use prognosis::generation::{compute_confidence, LabelScores};
use prognosis::model::{indicator_schema, PatientCase, UnifiedLabel};
use prognosis::pipeline::{Engine, PipelineError, PredictOptions};
use prognosis::retrieval::{load_index, search_topk, RetrievalError, VectorIndex};

pub const PROGNOSIS_LABEL_POOR: i32 = 0;
pub const PROGNOSIS_LABEL_FAIR: i32 = 1;
pub const PROGNOSIS_LABEL_GOOD: i32 = 2;
pub const PROGNOSIS_LABEL_EXCELLENT: i32 = 3;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrognosisStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Validation = 4,
    NotFound = 5,
    Io = 6,
    Backend = 7,
    Panic = 8,
}

/// Opaque prediction engine.
pub struct PrognosisEngine {
    engine: Engine,
}

/// Opaque loaded vector index with a matching local embedder.
pub struct PrognosisIndex {
    index: VectorIndex,
    embedder: HashEmbedder,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let message = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(message).ok());
}

struct Failure(PrognosisStatus, String);

impl Failure {
    fn new(status: PrognosisStatus, message: impl Into<String>) -> Self {
        Failure(status, message.into())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::NotFound(_) => PrognosisStatus::NotFound,
            e if e.is_validation() => PrognosisStatus::Validation,
            PipelineError::Store { .. } => PrognosisStatus::Io,
            _ => PrognosisStatus::Backend,
        };
        Failure(status, e.to_string())
    }
}

impl From<RetrievalError> for Failure {
    fn from(e: RetrievalError) -> Self {
        let status = match &e {
            RetrievalError::Io { .. } => PrognosisStatus::Io,
            RetrievalError::Embed { .. } => PrognosisStatus::Backend,
            _ => PrognosisStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PrognosisStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PrognosisStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PrognosisStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(PrognosisStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(PrognosisStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

fn check_out<T>(p: *mut T) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(PrognosisStatus::NullPointer, "output pointer is null"))
    } else {
        Ok(())
    }
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', "\\u0000")).expect("NUL bytes removed").into_raw()
}

fn label_from(i: i32) -> Result<UnifiedLabel, Failure> {
    usize::try_from(i)
        .ok()
        .and_then(UnifiedLabel::from_index)
        .ok_or_else(|| Failure::new(PrognosisStatus::InvalidArgument, format!("label code {i} is not in 0..=3")))
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn prognosis_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a pointer previously returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prognosis_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates an engine from a TOML config file, or from defaults and the
/// environment when `config_path` is null.
///
/// # Safety
/// `config_path` must be null or a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prognosis_engine_new(config_path: *const c_char, out: *mut *mut PrognosisEngine) -> PrognosisStatus {
    guard(|| {
        check_out(out)?;
        *out = ptr::null_mut();
        let path = opt_str_arg(config_path, "config_path")?;
        let config = PipelineConfig::load(path.map(Path::new))
            .map_err(|e| Failure::new(PrognosisStatus::Validation, e.to_string()))?;
        let engine = Engine::from_config(config)?;
        *out = Box::into_raw(Box::new(PrognosisEngine { engine }));
        Ok(())
    })
}

/// # Safety
/// `engine` must be null or a handle from [`prognosis_engine_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prognosis_engine_free(engine: *mut PrognosisEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Predicts one case bundle given as JSON. `variant` may be null (full);
/// a negative `k` uses the configured default. Writes the result JSON to `out_json`.
///
/// # Safety
/// Pointers must be valid; `variant` may be null.
#[no_mangle]
pub unsafe extern "C" fn prognosis_predict(
    engine: *const PrognosisEngine,
    case_json: *const c_char,
    variant: *const c_char,
    k: i64,
    out_json: *mut *mut c_char,
) -> PrognosisStatus {
    guard(|| {
        check_out(out_json)?;
        *out_json = ptr::null_mut();
        let engine = engine
            .as_ref()
            .ok_or_else(|| Failure::new(PrognosisStatus::NullPointer, "engine is null"))?;
        let text = str_arg(case_json, "case_json")?;
        let case: PatientCase = serde_json::from_str(text)
            .map_err(|e| Failure::new(PrognosisStatus::Validation, format!("case bundle: {e}")))?;
        let variant = match opt_str_arg(variant, "variant")? {
            Some(v) => v.parse::<AblationVariant>().map_err(|e| Failure::new(PrognosisStatus::InvalidArgument, e))?,
            None => AblationVariant::Full,
        };
        let k = usize::try_from(k).ok();
        let result = engine.engine.predict(&case, PredictOptions { variant, k })?;
        *out_json = into_c_string(serde_json::to_string(&result).expect("result serializes"));
        Ok(())
    })
}

/// Writes the indicator schema as a JSON array to `out_json`.
///
/// # Safety
/// `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prognosis_schema_json(out_json: *mut *mut c_char) -> PrognosisStatus {
    guard(|| {
        check_out(out_json)?;
        *out_json = into_c_string(serde_json::to_string(&indicator_schema()).expect("schema serializes"));
        Ok(())
    })
}

/// Maps a LEFS score (0..=80) to a label code.
///
/// # Safety
/// `out_label` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prognosis_lefs_label(score: i32, out_label: *mut i32) -> PrognosisStatus {
    guard(|| {
        check_out(out_label)?;
        let band = lefs_band(score).map_err(|e| Failure::new(PrognosisStatus::InvalidArgument, e.to_string()))?;
        *out_label = unify_lefs(band).index() as i32;
        Ok(())
    })
}

/// Maps an Enneking score (0..=30) to a label code.
///
/// # Safety
/// `out_label` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prognosis_enneking_label(score: i32, out_label: *mut i32) -> PrognosisStatus {
    guard(|| {
        check_out(out_label)?;
        let label = enneking_label(score).map_err(|e| Failure::new(PrognosisStatus::InvalidArgument, e.to_string()))?;
        *out_label = label.index() as i32;
        Ok(())
    })
}

/// Macro-F1 over `n` paired label codes.
///
/// # Safety
/// `reference` and `predicted` must each point to `n` readable values.
#[no_mangle]
pub unsafe extern "C" fn prognosis_macro_f1(
    reference: *const i32,
    predicted: *const i32,
    n: usize,
    out_f1: *mut f64,
) -> PrognosisStatus {
    guard(|| {
        check_out(out_f1)?;
        if n == 0 {
            return Err(Failure::new(PrognosisStatus::InvalidArgument, "no label pairs"));
        }
        if reference.is_null() || predicted.is_null() {
            return Err(Failure::new(PrognosisStatus::NullPointer, "label array is null"));
        }
        let r = std::slice::from_raw_parts(reference, n);
        let p = std::slice::from_raw_parts(predicted, n);
        let pairs = r
            .iter()
            .zip(p)
            .map(|(&a, &b)| Ok((label_from(a)?, label_from(b)?)))
            .collect::<Result<Vec<_>, Failure>>()?;
        *out_f1 = macro_f1(&confusion_matrix(&pairs)).map_err(|e| Failure::new(PrognosisStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}

/// Softmax probability of `chosen` given four label log-likelihoods in
/// Poor, Fair, Good, Excellent order.
///
/// # Safety
/// `scores` must point to four readable values.
#[no_mangle]
pub unsafe extern "C" fn prognosis_confidence(scores: *const f64, chosen: i32, out_confidence: *mut f64) -> PrognosisStatus {
    guard(|| {
        check_out(out_confidence)?;
        if scores.is_null() {
            return Err(Failure::new(PrognosisStatus::NullPointer, "scores is null"));
        }
        let values: [f64; 4] = std::slice::from_raw_parts(scores, 4).try_into().expect("four scores");
        let scores = LabelScores::new(values).map_err(|e| Failure::new(PrognosisStatus::InvalidArgument, e.to_string()))?;
        *out_confidence = compute_confidence(&scores, label_from(chosen)?);
        Ok(())
    })
}

/// Loads a saved index. Queries are embedded with the local hash embedder
/// at the index's dimension.
///
/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prognosis_index_load(path: *const c_char, out: *mut *mut PrognosisIndex) -> PrognosisStatus {
    guard(|| {
        check_out(out)?;
        *out = ptr::null_mut();
        let index = load_index(str_arg(path, "path")?)?;
        let embedder = HashEmbedder::new(index.dim()).map_err(|e| Failure::new(PrognosisStatus::InvalidArgument, e.to_string()))?;
        *out = Box::into_raw(Box::new(PrognosisIndex { index, embedder }));
        Ok(())
    })
}

/// # Safety
/// `index` must be null or a handle from [`prognosis_index_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn prognosis_index_free(index: *mut PrognosisIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Number of entries in a loaded index.
///
/// # Safety
/// `index` must be a live handle; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prognosis_index_len(index: *const PrognosisIndex, out_len: *mut usize) -> PrognosisStatus {
    guard(|| {
        check_out(out_len)?;
        let index = index.as_ref().ok_or_else(|| Failure::new(PrognosisStatus::NullPointer, "index is null"))?;
        *out_len = index.index.len();
        Ok(())
    })
}

/// Top-`k` passages for a free-text query, as a JSON array.
///
/// # Safety
/// Pointers must be valid; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prognosis_index_search(
    index: *const PrognosisIndex,
    query: *const c_char,
    k: usize,
    out_json: *mut *mut c_char,
) -> PrognosisStatus {
    guard(|| {
        check_out(out_json)?;
        *out_json = ptr::null_mut();
        let index = index.as_ref().ok_or_else(|| Failure::new(PrognosisStatus::NullPointer, "index is null"))?;
        let query = str_arg(query, "query")?;
        let vector = index
            .embedder
            .embed(query)
            .map_err(|e| Failure::new(PrognosisStatus::InvalidArgument, e.to_string()))?;
        let hits = search_topk(&index.index, &vector, k, None)?;
        *out_json = into_c_string(serde_json::to_string(&hits).expect("passages serialize"));
        Ok(())
    })
}
