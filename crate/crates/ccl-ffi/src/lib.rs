//! C ABI over the grounding library.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `_free` function. Every fallible call returns a `ccl_status`;
//! on failure `ccl_last_error` returns a message describing what went wrong.
//! The library is not thread-safe across a single handle; distinct handles
//! may be used from distinct threads.

// C-style names are part of the ABI surface.
#![allow(non_camel_case_types)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use ccl_core::error::CclError;
use ccl_core::eval::evaluate;
use ccl_core::model::checkpoint::{load_checkpoint, Checkpoint};
use ccl_core::model::forward;
use ccl_core::synthetic::{generate_dataset, load_dataset, DatasetSplit, SyntheticConfig};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ccl_status {
    CCL_OK = 0,
    /// Null pointer, malformed UTF-8, or an argument rejected by validation.
    CCL_ERR_INVALID_ARG = 1,
    /// File could not be read or written.
    CCL_ERR_IO = 2,
    /// File contents did not parse.
    CCL_ERR_PARSE = 3,
    /// Numerical or internal failure.
    CCL_ERR_RUNTIME = 4,
    /// Unknown sample id.
    CCL_ERR_NOT_FOUND = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', "?")).unwrap();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &CclError) -> ccl_status {
    match err {
        CclError::Io(_) => ccl_status::CCL_ERR_IO,
        CclError::Parse { .. } | CclError::Json(_) => ccl_status::CCL_ERR_PARSE,
        CclError::UnknownSample(_) => ccl_status::CCL_ERR_NOT_FOUND,
        CclError::InvalidConfig(_) | CclError::CannotPlaceEvents(_) => {
            ccl_status::CCL_ERR_INVALID_ARG
        }
        _ => ccl_status::CCL_ERR_RUNTIME,
    }
}

fn fail(err: CclError) -> ccl_status {
    let s = status_of(&err);
    set_error(&err.to_string());
    s
}

/// Opaque dataset handle.
pub struct ccl_dataset {
    split: DatasetSplit,
    config: SyntheticConfig,
}

/// Opaque model handle (a loaded checkpoint).
pub struct ccl_model {
    ckpt: Checkpoint,
}

/// Evaluation metrics over the dataset's test split.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct ccl_metrics {
    pub mean_iou: f64,
    pub recall_03: f64,
    pub recall_05: f64,
    pub recall_07: f64,
    pub num_sentences: usize,
}

/// Message for the most recent failure on this thread. The pointer is valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ccl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, ccl_status> {
    if p.is_null() {
        set_error("null path");
        return Err(ccl_status::CCL_ERR_INVALID_ARG);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("path is not valid UTF-8");
        ccl_status::CCL_ERR_INVALID_ARG
    })
}

/// Generates a dataset from a JSON configuration string; pass null for the
/// built-in default configuration.
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccl_dataset_generate(
    config_json: *const c_char,
    out: *mut *mut ccl_dataset,
) -> ccl_status {
    if out.is_null() {
        set_error("null output pointer");
        return ccl_status::CCL_ERR_INVALID_ARG;
    }
    *out = ptr::null_mut();
    let config = if config_json.is_null() {
        SyntheticConfig::default()
    } else {
        let text = match path_arg(config_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => {
                set_error(&e.to_string());
                return ccl_status::CCL_ERR_PARSE;
            }
        }
    };
    match generate_dataset(&config) {
        Ok(split) => {
            *out = Box::into_raw(Box::new(ccl_dataset { split, config }));
            ccl_status::CCL_OK
        }
        Err(e) => fail(e),
    }
}

/// Loads a dataset written by the library.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccl_dataset_load(
    path: *const c_char,
    out: *mut *mut ccl_dataset,
) -> ccl_status {
    if out.is_null() {
        set_error("null output pointer");
        return ccl_status::CCL_ERR_INVALID_ARG;
    }
    *out = ptr::null_mut();
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match load_dataset(Path::new(path)) {
        Ok((split, config)) => {
            *out = Box::into_raw(Box::new(ccl_dataset { split, config }));
            ccl_status::CCL_OK
        }
        Err(e) => fail(e),
    }
}

/// Number of samples in each split.
///
/// # Safety
/// `ds` must be a live dataset handle; count pointers may be null to skip.
#[no_mangle]
pub unsafe extern "C" fn ccl_dataset_counts(
    ds: *const ccl_dataset,
    labeled: *mut usize,
    unlabeled: *mut usize,
    test: *mut usize,
) -> ccl_status {
    if ds.is_null() {
        set_error("null dataset handle");
        return ccl_status::CCL_ERR_INVALID_ARG;
    }
    let d = &*ds;
    if !labeled.is_null() {
        *labeled = d.split.train_labeled.len();
    }
    if !unlabeled.is_null() {
        *unlabeled = d.split.train_unlabeled.len();
    }
    if !test.is_null() {
        *test = d.split.test.len();
    }
    ccl_status::CCL_OK
}

/// Serializes the dataset's generation config as JSON into `buf`
/// (NUL-terminated, truncated to `capacity`).
///
/// # Safety
/// `ds` must be a live handle; `buf` must have room for `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn ccl_dataset_config_json(
    ds: *const ccl_dataset,
    buf: *mut c_char,
    capacity: usize,
) -> ccl_status {
    if ds.is_null() || buf.is_null() || capacity == 0 {
        set_error("null argument or zero capacity");
        return ccl_status::CCL_ERR_INVALID_ARG;
    }
    let json = serde_json::to_string(&(*ds).config).unwrap();
    let bytes = json.as_bytes();
    let n = bytes.len().min(capacity - 1);
    ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
    *buf.add(n) = 0;
    ccl_status::CCL_OK
}

/// # Safety
/// `ds` must come from `ccl_dataset_generate` or `ccl_dataset_load` and must
/// not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn ccl_dataset_free(ds: *mut ccl_dataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccl_model_load(
    path: *const c_char,
    out: *mut *mut ccl_model,
) -> ccl_status {
    if out.is_null() {
        set_error("null output pointer");
        return ccl_status::CCL_ERR_INVALID_ARG;
    }
    *out = ptr::null_mut();
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match load_checkpoint(Path::new(path)) {
        Ok(ckpt) => {
            *out = Box::into_raw(Box::new(ccl_model { ckpt }));
            ccl_status::CCL_OK
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `m` must come from `ccl_model_load` and must not be used afterwards.
/// Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn ccl_model_free(m: *mut ccl_model) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Predicts intervals for one sample. `out_intervals` receives up to
/// `capacity` (start, end) pairs, 2 doubles per sentence; `out_count`
/// receives the sentence count.
///
/// # Safety
/// All pointers must be valid; `out_intervals` must have room for
/// `2 * capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn ccl_model_predict(
    m: *const ccl_model,
    ds: *const ccl_dataset,
    sample_id: *const c_char,
    out_intervals: *mut f64,
    capacity: usize,
    out_count: *mut usize,
) -> ccl_status {
    if m.is_null() || ds.is_null() || out_intervals.is_null() || out_count.is_null() {
        set_error("null argument");
        return ccl_status::CCL_ERR_INVALID_ARG;
    }
    let id = match path_arg(sample_id) {
        Ok(s) => s,
        Err(s) => return s,
    };
    let model = &*m;
    let data = &*ds;
    let sample = match data.split.find(id) {
        Some(s) => s,
        None => {
            set_error(&format!("unknown sample id {id}"));
            return ccl_status::CCL_ERR_NOT_FOUND;
        }
    };
    let out = match forward(
        &model.ckpt.params,
        &model.ckpt.config,
        &sample.video_feats,
        &sample.query_feats,
    ) {
        Ok(o) => o,
        Err(e) => return fail(e),
    };
    let n = out.intervals.len();
    *out_count = n;
    if n > capacity {
        set_error(&format!("capacity {capacity} < {n} sentences"));
        return ccl_status::CCL_ERR_INVALID_ARG;
    }
    for (i, iv) in out.intervals.iter().enumerate() {
        *out_intervals.add(2 * i) = iv.start;
        *out_intervals.add(2 * i + 1) = iv.end;
    }
    ccl_status::CCL_OK
}

/// Evaluates the model on the dataset's test split.
///
/// # Safety
/// All pointers must be valid handles.
#[no_mangle]
pub unsafe extern "C" fn ccl_model_evaluate(
    m: *const ccl_model,
    ds: *const ccl_dataset,
    out: *mut ccl_metrics,
) -> ccl_status {
    if m.is_null() || ds.is_null() || out.is_null() {
        set_error("null argument");
        return ccl_status::CCL_ERR_INVALID_ARG;
    }
    let model = &*m;
    let data = &*ds;
    match evaluate(&model.ckpt.params, &model.ckpt.config, &data.split.test) {
        Ok(metrics) => {
            *out = ccl_metrics {
                mean_iou: metrics.mean_iou,
                recall_03: metrics.recall_03,
                recall_05: metrics.recall_05,
                recall_07: metrics.recall_07,
                num_sentences: metrics.num_sentences,
            };
            ccl_status::CCL_OK
        }
        Err(e) => fail(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn tiny_config_json() -> CString {
        CString::new(
            r#"{"num_samples": 6, "num_test": 2, "t_clips": 16, "d_v": 8, "d_q": 8,
                "n_range": [2, 3], "noise_std": 0.1, "concept_dim": 4,
                "labeled_fraction": 0.5, "seed": 1}"#,
        )
        .unwrap()
    }

    #[test]
    fn generate_query_and_free() {
        unsafe {
            let mut ds: *mut ccl_dataset = ptr::null_mut();
            let cfg = tiny_config_json();
            assert_eq!(
                ccl_dataset_generate(cfg.as_ptr(), &mut ds),
                ccl_status::CCL_OK
            );
            let (mut l, mut u, mut t) = (0usize, 0usize, 0usize);
            assert_eq!(
                ccl_dataset_counts(ds, &mut l, &mut u, &mut t),
                ccl_status::CCL_OK
            );
            assert_eq!((l + u, t), (6, 2));
            ccl_dataset_free(ds);
        }
    }

    #[test]
    fn null_arguments_are_rejected_with_message() {
        unsafe {
            let mut ds: *mut ccl_dataset = ptr::null_mut();
            assert_eq!(
                ccl_dataset_load(ptr::null(), &mut ds),
                ccl_status::CCL_ERR_INVALID_ARG
            );
            let msg = CStr::from_ptr(ccl_last_error()).to_str().unwrap();
            assert!(!msg.is_empty());
        }
    }

    #[test]
    fn missing_file_reports_io_error() {
        unsafe {
            let mut m: *mut ccl_model = ptr::null_mut();
            let path = CString::new("/nonexistent/ckpt.json").unwrap();
            assert_eq!(ccl_model_load(path.as_ptr(), &mut m), ccl_status::CCL_ERR_IO);
            assert!(m.is_null());
        }
    }
}
