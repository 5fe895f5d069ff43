//! C ABI over the gcm core library.
//!
//! Conventions:
//! - Every fallible call returns a `GcmStatus`; `GCM_STATUS_OK` is 0.
//! - On failure, `gcm_last_error()` returns a thread-local UTF-8 message
//!   valid until the next failing call on the same thread.
//! - Handles (`GcmModel`, `GcmDataset`, `GcmPlan`) are opaque; free them
//!   with the matching `*_free` function exactly once.
//! - Token buffers are caller-allocated; calls report the required length.
//!
//! The header `include/gcm.h` is regenerated by the build script.

use gcm_core::data::TaskDataset;
use gcm_core::error::GcmError;
use gcm_core::judge;
use gcm_core::localize::LocalizeMethod;
use gcm_core::model::{InterventionSpec, ModelParams};
use gcm_core::steer::SteeringPlan;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GcmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Utf8 = 3,
    Io = 4,
    Parse = 5,
    Validation = 6,
    Training = 7,
    Degenerate = 8,
    BufferTooSmall = 9,
    Internal = 10,
}

/// Opaque trained-model handle.
pub struct GcmModel {
    params: ModelParams,
}

/// Opaque contrastive-dataset handle.
pub struct GcmDataset {
    dataset: TaskDataset,
}

/// Opaque steering-plan handle.
pub struct GcmPlan {
    plan: SteeringPlan,
}

/// Model shape, mirrored as plain integers for bindings.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GcmModelConfig {
    pub n_layers: u32,
    pub n_heads: u32,
    pub d_model: u32,
    pub d_head: u32,
    pub d_mlp: u32,
    pub vocab_size: u32,
    pub max_seq_len: u32,
}

/// Judge outcome with one flag per axis; `success` is their conjunction.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GcmVerdict {
    pub concept: bool,
    pub relevance: bool,
    pub fluency: bool,
    pub success: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', "?");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &GcmError) -> GcmStatus {
    match err {
        GcmError::Shape(_) | GcmError::Input(_) => GcmStatus::InvalidArgument,
        GcmError::Validation(_) => GcmStatus::Validation,
        GcmError::Parse { .. } => GcmStatus::Parse,
        GcmError::Training(_) => GcmStatus::Training,
        GcmError::Degenerate(_) => GcmStatus::Degenerate,
        GcmError::Io(_) => GcmStatus::Io,
        GcmError::Json(_) => GcmStatus::Parse,
    }
}

fn fail(err: GcmError) -> GcmStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

/// Last error message on this thread; empty string when no error occurred.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gcm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static C string.
#[no_mangle]
pub extern "C" fn gcm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn path_from(ptr: *const c_char) -> Result<&'static Path, GcmStatus> {
    if ptr.is_null() {
        set_error("null path");
        return Err(GcmStatus::NullPointer);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(GcmStatus::Utf8)
        }
    }
}

unsafe fn slice_from<'a>(ptr: *const u32, len: usize) -> Result<&'a [u32], GcmStatus> {
    if ptr.is_null() && len > 0 {
        set_error("null token buffer");
        return Err(GcmStatus::NullPointer);
    }
    if len == 0 {
        return Ok(&[]);
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

fn write_tokens(tokens: &[u32], out: *mut u32, cap: usize, out_len: *mut usize) -> GcmStatus {
    if out_len.is_null() {
        set_error("null out_len");
        return GcmStatus::NullPointer;
    }
    unsafe { *out_len = tokens.len() };
    if tokens.len() > cap {
        set_error("output buffer too small");
        return GcmStatus::BufferTooSmall;
    }
    if !tokens.is_empty() {
        if out.is_null() {
            set_error("null output buffer");
            return GcmStatus::NullPointer;
        }
        unsafe { std::ptr::copy_nonoverlapping(tokens.as_ptr(), out, tokens.len()) };
    }
    GcmStatus::Ok
}

// ── Model ───────────────────────────────────────────────────────────────────

/// Load a checkpoint from `path` into a new model handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gcm_model_load(
    path: *const c_char,
    out: *mut *mut GcmModel,
) -> GcmStatus {
    if out.is_null() {
        set_error("null out pointer");
        return GcmStatus::NullPointer;
    }
    let path = match path_from(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match gcm_core::model::load_checkpoint(path) {
        Ok(params) => {
            *out = Box::into_raw(Box::new(GcmModel { params }));
            GcmStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `model` must come from `gcm_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gcm_model_free(model: *mut GcmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn gcm_model_config(
    model: *const GcmModel,
    out: *mut GcmModelConfig,
) -> GcmStatus {
    if model.is_null() || out.is_null() {
        set_error("null pointer");
        return GcmStatus::NullPointer;
    }
    let c = (*model).params.config;
    *out = GcmModelConfig {
        n_layers: c.n_layers as u32,
        n_heads: c.n_heads as u32,
        d_model: c.d_model as u32,
        d_head: c.d_head as u32,
        d_mlp: c.d_mlp as u32,
        vocab_size: c.vocab_size as u32,
        max_seq_len: c.max_seq_len as u32,
    };
    GcmStatus::Ok
}

/// Greedy decoding from `prompt`. `stop_token < 0` disables the stop check.
/// On success `out_len` holds the number of generated tokens; if it exceeds
/// `out_cap`, `BufferTooSmall` is returned with `out_len` set to the
/// required capacity.
///
/// # Safety
/// Pointers must be valid; `prompt_len`/`out_cap` must describe real buffers.
#[no_mangle]
pub unsafe extern "C" fn gcm_greedy_generate(
    model: *const GcmModel,
    prompt: *const u32,
    prompt_len: usize,
    max_new: usize,
    stop_token: i64,
    out: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> GcmStatus {
    if model.is_null() {
        set_error("null model");
        return GcmStatus::NullPointer;
    }
    let prompt = match slice_from(prompt, prompt_len) {
        Ok(s) => s,
        Err(s) => return s,
    };
    let stop = if stop_token < 0 { None } else { Some(stop_token as u32) };
    match (*model).params.greedy_generate(prompt, &InterventionSpec::empty(), max_new, stop) {
        Ok(tokens) => write_tokens(&tokens, out, out_cap, out_len),
        Err(e) => fail(e),
    }
}

/// Teacher-forced log-probability of `response` given `prompt`.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn gcm_logprob_response(
    model: *const GcmModel,
    prompt: *const u32,
    prompt_len: usize,
    response: *const u32,
    response_len: usize,
    out: *mut f64,
) -> GcmStatus {
    if model.is_null() || out.is_null() {
        set_error("null pointer");
        return GcmStatus::NullPointer;
    }
    let prompt = match slice_from(prompt, prompt_len) {
        Ok(s) => s,
        Err(s) => return s,
    };
    let response = match slice_from(response, response_len) {
        Ok(s) => s,
        Err(s) => return s,
    };
    match (*model).params.logprob_response(prompt, response, &InterventionSpec::empty()) {
        Ok(lp) => {
            *out = lp;
            GcmStatus::Ok
        }
        Err(e) => fail(e),
    }
}

// ── Dataset ─────────────────────────────────────────────────────────────────

/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gcm_dataset_load(
    path: *const c_char,
    out: *mut *mut GcmDataset,
) -> GcmStatus {
    if out.is_null() {
        set_error("null out pointer");
        return GcmStatus::NullPointer;
    }
    let path = match path_from(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match gcm_core::data::load_jsonl(path) {
        Ok(dataset) => {
            *out = Box::into_raw(Box::new(GcmDataset { dataset }));
            GcmStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `dataset` must come from `gcm_dataset_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gcm_dataset_free(dataset: *mut GcmDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of contrastive pairs; 0 for a null handle.
///
/// # Safety
/// `dataset` must be a valid handle or null.
#[no_mangle]
pub unsafe extern "C" fn gcm_dataset_len(dataset: *const GcmDataset) -> usize {
    if dataset.is_null() {
        0
    } else {
        (*dataset).dataset.pairs.len()
    }
}

// ── Localization ────────────────────────────────────────────────────────────

/// Rank attention heads and write the score table CSV to `out_path`.
/// `method` is one of "act_patch", "attrib_patch", "knockout", "iti_probe",
/// "random".
///
/// # Safety
/// All pointers must be valid NUL-terminated strings / live handles.
#[no_mangle]
pub unsafe extern "C" fn gcm_localize_to_csv(
    model: *const GcmModel,
    dataset: *const GcmDataset,
    method: *const c_char,
    seed: u64,
    out_path: *const c_char,
) -> GcmStatus {
    if model.is_null() || dataset.is_null() || method.is_null() {
        set_error("null pointer");
        return GcmStatus::NullPointer;
    }
    let method = match CStr::from_ptr(method).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("method is not valid UTF-8");
            return GcmStatus::Utf8;
        }
    };
    let out_path = match path_from(out_path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let method = match LocalizeMethod::from_tag(method) {
        Ok(m) => m,
        Err(e) => return fail(e),
    };
    let params = &(*model).params;
    let result = gcm_core::harness::localizer_scores(
        params,
        &(*dataset).dataset,
        method,
        seed,
        gcm_core::localize::AttributionSign::PatchDirection,
    )
    .and_then(|table| gcm_core::localize::save_score_csv(&table, &params.config, out_path));
    match result {
        Ok(()) => GcmStatus::Ok,
        Err(e) => fail(e),
    }
}

// ── Steering plans ──────────────────────────────────────────────────────────

/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gcm_plan_load(path: *const c_char, out: *mut *mut GcmPlan) -> GcmStatus {
    if out.is_null() {
        set_error("null out pointer");
        return GcmStatus::NullPointer;
    }
    let path = match path_from(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match gcm_core::steer::load_plan(path) {
        Ok(plan) => {
            *out = Box::into_raw(Box::new(GcmPlan { plan }));
            GcmStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `plan` must come from `gcm_plan_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gcm_plan_free(plan: *mut GcmPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Greedy decoding under a steering plan; same buffer contract as
/// `gcm_greedy_generate`.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn gcm_apply_plan(
    model: *const GcmModel,
    plan: *const GcmPlan,
    prompt: *const u32,
    prompt_len: usize,
    max_new: usize,
    stop_token: i64,
    out: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> GcmStatus {
    if model.is_null() || plan.is_null() {
        set_error("null pointer");
        return GcmStatus::NullPointer;
    }
    let prompt = match slice_from(prompt, prompt_len) {
        Ok(s) => s,
        Err(s) => return s,
    };
    let stop = if stop_token < 0 { None } else { Some(stop_token as u32) };
    match gcm_core::steer::apply_plan(&(*model).params, prompt, &(*plan).plan, max_new, stop) {
        Ok(tokens) => write_tokens(&tokens, out, out_cap, out_len),
        Err(e) => fail(e),
    }
}

// ── Judging ─────────────────────────────────────────────────────────────────

/// Judge a steered response against its prompt; the baseline is recorded in
/// downstream reports but does not change the verdict.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn gcm_judge_response(
    prompt: *const u32,
    prompt_len: usize,
    steered: *const u32,
    steered_len: usize,
    baseline: *const u32,
    baseline_len: usize,
    out: *mut GcmVerdict,
) -> GcmStatus {
    if out.is_null() {
        set_error("null out pointer");
        return GcmStatus::NullPointer;
    }
    let prompt = match slice_from(prompt, prompt_len) {
        Ok(s) => s,
        Err(s) => return s,
    };
    let steered = match slice_from(steered, steered_len) {
        Ok(s) => s,
        Err(s) => return s,
    };
    let baseline = match slice_from(baseline, baseline_len) {
        Ok(s) => s,
        Err(s) => return s,
    };
    match judge::judge_response(prompt, steered, baseline) {
        Ok(v) => {
            *out = GcmVerdict {
                concept: v.concept_pass,
                relevance: v.relevance_pass,
                fluency: v.fluency_pass,
                success: v.success,
            };
            GcmStatus::Ok
        }
        Err(e) => fail(e),
    }
}
