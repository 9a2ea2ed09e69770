//! C ABI for loading dctnet checkpoints and producing forecasts.
//!
//! Every fallible function returns a [`DctStatus`]. On failure the message
//! is available from [`dct_last_error`] on the same thread until the next
//! call into the library.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dctnet::checkpoint::{Checkpoint, Metadata};
use dctnet::{DctNet, Error, ModelConfig, Tensor};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DctStatus {
    Ok = 0,
    NullPointer = 1,
    /// A string argument is not valid UTF-8 or a length is inconsistent.
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Checkpoint = 5,
    Io = 6,
    /// Internal failure, including caught panics.
    Internal = 7,
}

/// Opaque model handle.
pub struct DctModel {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("nul bytes removed")));
}

fn status_of(err: &Error) -> DctStatus {
    match err {
        Error::Config(_) | Error::Param(_) => DctStatus::Config,
        Error::Data(_) | Error::Shape { .. } => DctStatus::Data,
        Error::Checkpoint(_) => DctStatus::Checkpoint,
        Error::Io { .. } => DctStatus::Io,
        _ => DctStatus::Internal,
    }
}

struct Failure(DctStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DctStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DctStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error(format!("internal error: {msg}"));
            DctStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DctStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(DctStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn model_ref<'a>(model: *const DctModel) -> Result<&'a DctModel, Failure> {
    model.as_ref().ok_or_else(|| null("model"))
}

unsafe fn store(out: *mut *mut DctModel, ckpt: Checkpoint) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(DctModel { ckpt }));
    Ok(())
}

/// Loads a checkpoint file. On success `*out` owns a handle that must be
/// released with [`dct_model_free`].
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dct_model_load(path: *const c_char, out: *mut *mut DctModel) -> DctStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        store(out, ckpt)
    })
}

/// Builds a freshly initialised model from a JSON model config. Fields
/// left out take their defaults; the `seed` field controls initialisation.
///
/// # Safety
/// `json` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dct_model_from_config_json(json: *const c_char, out: *mut *mut DctModel) -> DctStatus {
    guard(|| {
        let json = str_arg(json, "json")?;
        let config: ModelConfig =
            serde_json::from_str(json).map_err(|e| Failure(DctStatus::Config, format!("invalid configuration: {e}")))?;
        let seed = config.seed;
        let model = DctNet::new(config)?;
        let metadata = Metadata {
            seed,
            ..Default::default()
        };
        store(out, Checkpoint { model, metadata })
    })
}

/// Writes the model to a checkpoint file.
///
/// # Safety
/// `model` must come from this library and `path` be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn dct_model_save(model: *const DctModel, path: *const c_char) -> DctStatus {
    guard(|| {
        let model = model_ref(model)?;
        let path = str_arg(path, "path")?;
        model.ckpt.save(Path::new(path))?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dct_model_free(model: *mut DctModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Reports the input length, horizon and channel count. Any output
/// pointer may be null.
///
/// # Safety
/// `model` must come from this library; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn dct_model_dims(
    model: *const DctModel,
    seq_len: *mut usize,
    pred_len: *mut usize,
    channels: *mut usize,
) -> DctStatus {
    guard(|| {
        let cfg = &model_ref(model)?.ckpt.model.config;
        for (ptr, v) in [(seq_len, cfg.seq_len), (pred_len, cfg.pred_len), (channels, cfg.channels)] {
            if !ptr.is_null() {
                *ptr = v;
            }
        }
        Ok(())
    })
}

/// Forecasts `batch` windows. `input` holds `batch * seq_len * channels`
/// row-major values `[batch][step][channel]`; `output` receives
/// `batch * pred_len * channels` values in the same layout. When the
/// checkpoint carries normalisation statistics, input and output are in
/// the original data scale.
///
/// # Safety
/// `input` and `output` must point to at least `input_len` and
/// `output_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dct_model_forecast(
    model: *const DctModel,
    batch: usize,
    input: *const f64,
    input_len: usize,
    output: *mut f64,
    output_len: usize,
) -> DctStatus {
    guard(|| {
        let model = model_ref(model)?;
        if input.is_null() {
            return Err(null("input"));
        }
        if output.is_null() {
            return Err(null("output"));
        }
        let cfg = &model.ckpt.model.config;
        let (l, t, c) = (cfg.seq_len, cfg.pred_len, cfg.channels);
        if batch == 0 || input_len != batch * l * c || output_len != batch * t * c {
            return Err(Failure(
                DctStatus::InvalidArgument,
                format!(
                    "batch {batch} needs input_len {} and output_len {}, got {input_len} and {output_len}",
                    batch * l * c,
                    batch * t * c
                ),
            ));
        }
        let values = std::slice::from_raw_parts(input, input_len).to_vec();
        let mut x = Tensor::new([batch, l, c], values)?;
        let stats = model.ckpt.metadata.normalization.as_ref();
        if let Some(s) = stats {
            x = s.standardize(&x);
        }
        let mut y = model.ckpt.model.predict(&x)?.values;
        if let Some(s) = stats {
            y = s.destandardize(&y);
        }
        std::slice::from_raw_parts_mut(output, output_len).copy_from_slice(y.data());
        Ok(())
    })
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn dct_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn dct_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
