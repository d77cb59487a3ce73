//! C interface to `tamil-core`.
//!
//! Every function returns a [`TamilStatus`]; on failure the message is
//! available from [`tamil_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Strings
//! returned to the caller are released with [`tamil_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use tamil_core::engine::{predict_class_il, run_stream, RunOutcome, TrainConfig};
use tamil_core::numerics::{argmax, Tensor};
use tamil_core::taskdata::{generate_synthetic, load_stream, SyntheticConfig, TaskStream};
use tamil_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TamilStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Runtime = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TamilEvalMode {
    ClassIl = 0,
    TaskIl = 1,
    Oracle = 2,
}

/// A task stream, generated or loaded from CSV.
pub struct TamilStream(TaskStream);

/// A finished training run: model, buffer and report.
pub struct TamilRun(RunOutcome);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(TamilStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Config(_) | Error::Json(_) => TamilStatus::Config,
            Error::Io(_) => TamilStatus::Io,
            _ => TamilStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(TamilStatus::Config, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TamilStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TamilStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside tamil".into());
            TamilStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(TamilStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(TamilStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tamil_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn tamil_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn tamil_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates a synthetic stream from a JSON config.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tamil_stream_generate(config_json: *const c_char, out: *mut *mut TamilStream) -> TamilStatus {
    guard(|| {
        let cfg: SyntheticConfig = serde_json::from_str(str_arg(config_json, "config_json")?)?;
        let stream = generate_synthetic(&cfg)?;
        write_out(out, Box::into_raw(Box::new(TamilStream(stream))))
    })
}

/// Loads a stream from CSV (plus optional manifest).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tamil_stream_load(path: *const c_char, out: *mut *mut TamilStream) -> TamilStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let stream = load_stream(&path)?;
        write_out(out, Box::into_raw(Box::new(TamilStream(stream))))
    })
}

/// # Safety
/// `stream` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tamil_stream_num_tasks(stream: *const TamilStream, out: *mut usize) -> TamilStatus {
    guard(|| write_out(out, handle(stream, "stream")?.0.num_tasks()))
}

/// # Safety
/// `stream` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tamil_stream_num_classes(stream: *const TamilStream, out: *mut usize) -> TamilStatus {
    guard(|| write_out(out, handle(stream, "stream")?.0.num_classes()))
}

/// # Safety
/// `stream` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tamil_stream_feature_dim(stream: *const TamilStream, out: *mut usize) -> TamilStatus {
    guard(|| write_out(out, handle(stream, "stream")?.0.feature_dim()))
}

/// # Safety
/// `stream` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn tamil_stream_free(stream: *mut TamilStream) {
    if !stream.is_null() {
        drop(Box::from_raw(stream));
    }
}

/// Trains over the whole stream. `train_json` holds a training config;
/// null or `"{}"` selects the defaults.
///
/// # Safety
/// `stream` must be a live handle; `train_json` null or NUL-terminated;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tamil_run(
    stream: *const TamilStream,
    train_json: *const c_char,
    out: *mut *mut TamilRun,
) -> TamilStatus {
    guard(|| {
        let stream = handle(stream, "stream")?;
        let cfg: TrainConfig = if train_json.is_null() {
            TrainConfig::default()
        } else {
            serde_json::from_str(str_arg(train_json, "train_json")?)?
        };
        let outcome = run_stream(&stream.0, &cfg)?;
        write_out(out, Box::into_raw(Box::new(TamilRun(outcome))))
    })
}

/// Average accuracy over all tasks after the last one.
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tamil_run_final_accuracy(run: *const TamilRun, mode: TamilEvalMode, out: *mut f64) -> TamilStatus {
    guard(|| {
        let r = &handle(run, "run")?.0.report;
        let v = match mode {
            TamilEvalMode::ClassIl => r.class_il.final_average,
            TamilEvalMode::TaskIl => r.task_il.final_average,
            TamilEvalMode::Oracle => r.oracle.final_average,
        };
        write_out(out, v)
    })
}

/// The run report as JSON; free with [`tamil_string_free`].
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tamil_run_report_json(run: *const TamilRun, out: *mut *mut c_char) -> TamilStatus {
    guard(|| {
        let json = serde_json::to_string(&handle(run, "run")?.0.report)?;
        let c = CString::new(json).map_err(|e| Failure(TamilStatus::Runtime, e.to_string()))?;
        write_out(out, c.into_raw())
    })
}

/// Class-IL predictions for `rows` row-major samples of `cols` features.
///
/// # Safety
/// `features` must hold `rows * cols` values and `labels_out` room for
/// `rows` entries.
#[no_mangle]
pub unsafe extern "C" fn tamil_run_predict(
    run: *const TamilRun,
    features: *const f64,
    rows: usize,
    cols: usize,
    labels_out: *mut usize,
) -> TamilStatus {
    guard(|| {
        let model = &handle(run, "run")?.0.model;
        if features.is_null() {
            return Err(null("features"));
        }
        if labels_out.is_null() {
            return Err(null("labels_out"));
        }
        if rows == 0 {
            return Ok(());
        }
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Failure(TamilStatus::Runtime, "rows * cols overflows".into()))?;
        let data = std::slice::from_raw_parts(features, n).to_vec();
        let x = Tensor::new(vec![rows, cols], data)?;
        let (logits, _) = predict_class_il(model, &x)?;
        let labels = std::slice::from_raw_parts_mut(labels_out, rows);
        for (i, l) in labels.iter_mut().enumerate() {
            *l = argmax(logits.row(i));
        }
        Ok(())
    })
}

/// Writes the trained model as a JSON checkpoint.
///
/// # Safety
/// `run` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tamil_run_save_model(run: *const TamilRun, path: *const c_char) -> TamilStatus {
    guard(|| {
        let run = handle(run, "run")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        run.0.model.save(&path)?;
        Ok(())
    })
}

/// # Safety
/// `run` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn tamil_run_free(run: *mut TamilRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
