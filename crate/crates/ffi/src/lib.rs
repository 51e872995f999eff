//! C ABI for the transcript codec, prompt assembly and scoring.
//!
//! Conventions:
//! - Every fallible function returns a [`TuStatus`]; on anything but
//!   `TU_STATUS_OK` a message is available from [`tu_last_error`].
//! - Strings passed in are NUL-terminated UTF-8. Strings handed out through
//!   `out` pointers are owned by the caller and must be released with
//!   [`tu_string_free`].
//! - Structured values cross the boundary as JSON text, using the same field
//!   names as the record files.
//! - A registry is an opaque handle created by `tu_registry_*` and released
//!   with [`tu_registry_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use serde_json::Value;
use tooluse::curation::lcs_similarity;
use tooluse::eval::record_prompt;
use tooluse::metrics::{
    aggregate, bleu, score_prediction_text, EvalRecord, SampleScore, ScoreOptions,
};
use tooluse::react::{parse_transcript, serialize_transcript, split_arguments, Transcript};
use tooluse::registry::{render_tool_definitions, Prompts, Registry};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidJson = 3,
    Malformed = 4,
    ArityMismatch = 5,
    Registry = 6,
    EmptyEvalSet = 7,
    Io = 8,
    Internal = 99,
}

/// Opaque tool registry.
pub struct TuRegistry {
    inner: Registry,
    prompts: Prompts,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: TuStatus, msg: impl Into<String>) -> TuStatus {
    set_error(msg);
    status
}

type Outcome<T> = Result<T, (TuStatus, String)>;

fn guard(f: impl FnOnce() -> Outcome<()>) -> TuStatus {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(Ok(())) => TuStatus::Ok,
        Ok(Err((status, msg))) => fail(status, msg),
        Err(_) => fail(TuStatus::Internal, "internal panic"),
    }
}

unsafe fn input<'a>(p: *const c_char, name: &str) -> Outcome<&'a str> {
    if p.is_null() {
        return Err((TuStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| (TuStatus::InvalidUtf8, format!("{name}: {e}")))
}

unsafe fn registry<'a>(p: *const TuRegistry) -> Outcome<&'a TuRegistry> {
    p.as_ref()
        .ok_or_else(|| (TuStatus::NullArgument, "registry is null".to_string()))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Outcome<()> {
    if out.is_null() {
        return Err((TuStatus::NullArgument, "out is null".into()));
    }
    let c = CString::new(s).map_err(|e| (TuStatus::Internal, e.to_string()))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn put<T>(out: *mut T, v: T) -> Outcome<()> {
    if out.is_null() {
        return Err((TuStatus::NullArgument, "out is null".into()));
    }
    *out = v;
    Ok(())
}

fn json_in<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Outcome<T> {
    serde_json::from_str(text).map_err(|e| (TuStatus::InvalidJson, format!("{what}: {e}")))
}

fn json_out<T: serde::Serialize>(v: &T) -> Outcome<String> {
    serde_json::to_string(v).map_err(|e| (TuStatus::Internal, e.to_string()))
}

unsafe fn options(p: *const c_char) -> Outcome<ScoreOptions> {
    if p.is_null() {
        Ok(ScoreOptions::default())
    } else {
        json_in(input(p, "options")?, "options")
    }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tu_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn tu_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn tu_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// The built-in 31-tool registry.
#[no_mangle]
pub extern "C" fn tu_registry_builtin() -> *mut TuRegistry {
    Box::into_raw(Box::new(TuRegistry {
        inner: Registry::builtin(),
        prompts: Prompts::default(),
    }))
}

/// Loads a registry from a TOML tool file.
///
/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tu_registry_load(
    path: *const c_char,
    out: *mut *mut TuRegistry,
) -> TuStatus {
    guard(|| {
        let path = input(path, "path")?;
        let inner = Registry::load(Path::new(path)).map_err(|e| (TuStatus::Io, e.to_string()))?;
        let handle = Box::into_raw(Box::new(TuRegistry {
            inner,
            prompts: Prompts::default(),
        }));
        put(out, handle).inspect_err(|_| drop(Box::from_raw(handle)))
    })
}

/// Builds a registry from TOML text.
///
/// # Safety
/// `text` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tu_registry_from_toml(
    text: *const c_char,
    out: *mut *mut TuRegistry,
) -> TuStatus {
    guard(|| {
        let inner = Registry::from_toml_str(input(text, "text")?)
            .map_err(|e| (TuStatus::Registry, e.to_string()))?;
        let handle = Box::into_raw(Box::new(TuRegistry {
            inner,
            prompts: Prompts::default(),
        }));
        put(out, handle).inspect_err(|_| drop(Box::from_raw(handle)))
    })
}

/// Releases a registry. Null is ignored.
///
/// # Safety
/// `r` must come from a `tu_registry_*` constructor and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn tu_registry_free(r: *mut TuRegistry) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Number of tools, or 0 for null.
///
/// # Safety
/// `r` must be null or a live registry handle.
#[no_mangle]
pub unsafe extern "C" fn tu_registry_len(r: *const TuRegistry) -> usize {
    r.as_ref().map_or(0, |r| r.inner.len())
}

/// Argument count of `tool`.
///
/// # Safety
/// Pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tu_registry_arity(
    r: *const TuRegistry,
    tool: *const c_char,
    out: *mut usize,
) -> TuStatus {
    guard(|| {
        let r = registry(r)?;
        let spec = r
            .inner
            .lookup(input(tool, "tool")?)
            .map_err(|e| (TuStatus::Registry, e.to_string()))?;
        put(out, spec.arity())
    })
}

/// Tool definition block, one `Name: usage` line per tool. `tools_json` is a
/// JSON array of names, or null for every tool.
///
/// # Safety
/// Pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tu_tool_definitions(
    r: *const TuRegistry,
    tools_json: *const c_char,
    out: *mut *mut c_char,
) -> TuStatus {
    guard(|| {
        let r = registry(r)?;
        let subset: Option<Vec<String>> = if tools_json.is_null() {
            None
        } else {
            Some(json_in(input(tools_json, "tools")?, "tools")?)
        };
        let text = render_tool_definitions(&r.inner, subset.as_deref())
            .map_err(|e| (TuStatus::Registry, e.to_string()))?;
        put_string(out, text)
    })
}

/// Tool-usage prompt for an evaluation record given as JSON.
///
/// # Safety
/// Pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tu_tool_usage_prompt(
    r: *const TuRegistry,
    record_json: *const c_char,
    out: *mut *mut c_char,
) -> TuStatus {
    guard(|| {
        let r = registry(r)?;
        let rec: EvalRecord = json_in(input(record_json, "record")?, "record")?;
        let text = record_prompt(&r.inner, &r.prompts, &rec)
            .map_err(|e| (TuStatus::Registry, e.to_string()))?;
        put_string(out, text)
    })
}

/// Parses transcript text into its JSON form
/// `{"steps": [...], "terminated": bool}`.
///
/// # Safety
/// `text` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tu_parse_transcript(
    text: *const c_char,
    out: *mut *mut c_char,
) -> TuStatus {
    guard(|| {
        let t = parse_transcript(input(text, "text")?)
            .map_err(|e| (TuStatus::Malformed, e.to_string()))?;
        put_string(out, json_out(&t)?)
    })
}

/// Writes a JSON transcript back as keyword lines.
///
/// # Safety
/// `json` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tu_serialize_transcript(
    json: *const c_char,
    out: *mut *mut c_char,
) -> TuStatus {
    guard(|| {
        let t: Transcript = json_in(input(json, "transcript")?, "transcript")?;
        t.validate()
            .map_err(|e| (TuStatus::Malformed, e.to_string()))?;
        put_string(out, serialize_transcript(&t))
    })
}

/// Splits an action input into `arity` arguments, returned as a JSON array.
///
/// # Safety
/// `raw` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tu_split_arguments(
    raw: *const c_char,
    arity: usize,
    out: *mut *mut c_char,
) -> TuStatus {
    guard(|| {
        let args = split_arguments(input(raw, "raw")?, arity)
            .map_err(|e| (TuStatus::ArityMismatch, e.to_string()))?;
        put_string(out, json_out(&args)?)
    })
}

/// BLEU of `candidate` against `reference`.
///
/// # Safety
/// Strings must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tu_bleu(
    candidate: *const c_char,
    reference: *const c_char,
    out: *mut f64,
) -> TuStatus {
    guard(|| {
        let v = bleu(
            input(candidate, "candidate")?,
            input(reference, "reference")?,
        );
        put(out, v)
    })
}

/// Token LCS similarity of two instructions.
///
/// # Safety
/// Strings must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tu_lcs_similarity(
    a: *const c_char,
    b: *const c_char,
    out: *mut f64,
) -> TuStatus {
    guard(|| put(out, lcs_similarity(input(a, "a")?, input(b, "b")?)))
}

/// Scores model output text against an evaluation record. `options_json`
/// may be null for defaults (`{"path_mode": "filename", "no_tool_policy":
/// "vacuous"}`). The score is returned as JSON.
///
/// # Safety
/// Pointers must be valid (options may be null); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tu_score_prediction(
    r: *const TuRegistry,
    record_json: *const c_char,
    prediction: *const c_char,
    options_json: *const c_char,
    out: *mut *mut c_char,
) -> TuStatus {
    guard(|| {
        let r = registry(r)?;
        let rec: EvalRecord = json_in(input(record_json, "record")?, "record")?;
        let opts = options(options_json)?;
        let score = score_prediction_text(input(prediction, "prediction")?, &rec, &r.inner, &opts);
        put_string(out, json_out(&score)?)
    })
}

/// Aggregates a JSON array of sample scores into a report (rates,
/// per-tool table, seen/unseen split; the per-sample list is left out).
///
/// # Safety
/// Pointers must be valid (options may be null); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tu_aggregate(
    r: *const TuRegistry,
    scores_json: *const c_char,
    options_json: *const c_char,
    out: *mut *mut c_char,
) -> TuStatus {
    guard(|| {
        let r = registry(r)?;
        let scores: Vec<SampleScore> = json_in(input(scores_json, "scores")?, "scores")?;
        let opts = options(options_json)?;
        let report = aggregate(&scores, &r.inner, &opts)
            .map_err(|e| (TuStatus::EmptyEvalSet, e.to_string()))?;
        let mut v: Value =
            serde_json::to_value(&report).map_err(|e| (TuStatus::Internal, e.to_string()))?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("samples");
        }
        put_string(out, json_out(&v)?)
    })
}
