//! C ABI over the segforge engine.
//!
//! Handles are opaque pointers created by `sf_*_new`/`sf_*_load` and released
//! with the matching `sf_*_free`. Fallible calls return an [`SfStatus`]; on
//! failure the message is available from [`sf_last_error_message`] on the same
//! thread. Panics never cross the boundary: they are reported as
//! [`SfStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use segforge::data::NormalizationStats;
use segforge::eval::ConfusionMatrix;
use segforge::model::{ModelConfig, SegmentationModel};
use segforge::tensor::Tensor;
use segforge::train::{load_checkpoint, poly_lr};
use segforge::{Error, ErrorKind};

/// Status codes. Codes 1 to 6 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    Internal = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Checkpoint = 5,
    Io = 6,
    NullPointer = 7,
    InvalidArgument = 8,
    Panic = 9,
}

impl From<ErrorKind> for SfStatus {
    fn from(k: ErrorKind) -> Self {
        match k {
            ErrorKind::Config => SfStatus::Config,
            ErrorKind::Data => SfStatus::Data,
            ErrorKind::Numeric => SfStatus::Numeric,
            ErrorKind::Checkpoint => SfStatus::Checkpoint,
            ErrorKind::Io => SfStatus::Io,
            ErrorKind::Internal => SfStatus::Internal,
        }
    }
}

/// A segmentation network plus the input normalization it was trained with.
pub struct SfModel {
    model: SegmentationModel<f32>,
    normalization: Option<NormalizationStats>,
}

/// Accumulated confusion counts for IoU.
pub struct SfConfusion {
    cm: ConfusionMatrix,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(SfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(e.kind().into(), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SfStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SfStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SfStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            SfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null if none failed.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Polynomial learning-rate schedule: `max(min_lr, lr0 * (1 - epoch/total)^power)`.
#[no_mangle]
pub extern "C" fn sf_poly_lr(epoch: usize, total_epochs: usize, lr0: f64, power: f64, min_lr: f64) -> f64 {
    poly_lr(epoch, total_epochs, lr0, power, min_lr)
}

/// Builds a freshly initialized model from a JSON model configuration.
/// A null or empty `config_json` selects the default configuration.
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` must be a
/// valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn sf_model_new(config_json: *const c_char, out: *mut *mut SfModel) -> SfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let config = if config_json.is_null() {
            ModelConfig::default()
        } else {
            let text = str_arg(config_json, "config_json")?;
            if text.trim().is_empty() {
                ModelConfig::default()
            } else {
                serde_json::from_str(text).map_err(|e| Failure(SfStatus::Config, format!("model config: {e}")))?
            }
        };
        config.validate()?;
        let model = SegmentationModel::new(config)?;
        *out = Box::into_raw(Box::new(SfModel { model, normalization: None }));
        Ok(())
    })
}

/// Loads a model, with its normalization statistics, from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_model_load(path: *const c_char, out: *mut *mut SfModel) -> SfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let record = load_checkpoint::<f32>(Path::new(path))?;
        let model = record.build_model()?;
        let normalization = record.header.normalization.clone();
        *out = Box::into_raw(Box::new(SfModel { model, normalization }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from `sf_model_new`/`sf_model_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sf_model_free(model: *mut SfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable scalars, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sf_model_parameter_count(model: *const SfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.count_parameters())
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sf_model_num_classes(model: *const SfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().num_classes)
}

/// Input channels expected by the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sf_model_in_channels(model: *const SfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().in_channels)
}

/// Output stride; input height and width must be multiples of it. 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sf_model_output_stride(model: *const SfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().output_stride)
}

/// Whether the model carries normalization statistics (checkpoints usually do).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sf_model_has_normalization(model: *const SfModel) -> bool {
    model.as_ref().is_some_and(|m| m.normalization.is_some())
}

/// Runs eval-mode inference and writes per-pixel class labels.
///
/// `input` holds `n * c * h * w` floats in NCHW order. When `normalize` is
/// true the stored per-channel statistics are applied first; otherwise the
/// input is used as given. `labels` receives `n * h * w` bytes.
///
/// # Safety
/// `input` must point to `input_len` floats and `labels` to `labels_len` bytes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn sf_model_predict(
    model: *const SfModel,
    input: *const f32,
    input_len: usize,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    normalize: bool,
    labels: *mut u8,
    labels_len: usize,
) -> SfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if input.is_null() {
            return Err(null("input"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        let numel = n.checked_mul(c).and_then(|v| v.checked_mul(h)).and_then(|v| v.checked_mul(w));
        if numel != Some(input_len) {
            return Err(invalid(format!("input_len {input_len} does not match shape [{n}, {c}, {h}, {w}]")));
        }
        if labels_len != n * h * w {
            return Err(invalid(format!("labels_len {labels_len} must be n*h*w = {}", n * h * w)));
        }
        let mut data = std::slice::from_raw_parts(input, input_len).to_vec();
        if normalize {
            let stats = m.normalization.as_ref().ok_or_else(|| invalid("model has no normalization statistics"))?;
            if stats.mean.len() != c {
                return Err(invalid(format!("statistics cover {} channels, input has {c}", stats.mean.len())));
            }
            for (i, v) in data.iter_mut().enumerate() {
                let ch = (i / (h * w)) % c;
                *v = ((*v as f64 - stats.mean[ch]) / stats.std[ch]) as f32;
            }
        }
        let x = Tensor::new(&[n, c, h, w], data)?;
        let pred = m.model.predict(&x)?;
        std::slice::from_raw_parts_mut(labels, labels_len).copy_from_slice(&pred);
        Ok(())
    })
}

/// Creates an empty confusion matrix over `num_classes` classes (at least 1,
/// at most 256). Returns null and sets the last error on bad input.
#[no_mangle]
pub extern "C" fn sf_confusion_new(num_classes: usize) -> *mut SfConfusion {
    if num_classes == 0 || num_classes > 256 {
        set_last_error(format!("num_classes must be in 1..=256, got {num_classes}"));
        return ptr::null_mut();
    }
    Box::into_raw(Box::new(SfConfusion { cm: ConfusionMatrix::new(num_classes) }))
}

/// Releases a confusion matrix. Null is ignored.
///
/// # Safety
/// `cm` must be null or a live handle from `sf_confusion_new`.
#[no_mangle]
pub unsafe extern "C" fn sf_confusion_free(cm: *mut SfConfusion) {
    if !cm.is_null() {
        drop(Box::from_raw(cm));
    }
}

/// Adds `len` predicted/target label pairs.
///
/// # Safety
/// `cm` must be a live handle; `predicted` and `target` must each point to `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sf_confusion_update(
    cm: *mut SfConfusion,
    predicted: *const u8,
    target: *const u8,
    len: usize,
) -> SfStatus {
    guard(|| {
        let cm = cm.as_mut().ok_or_else(|| null("cm"))?;
        if predicted.is_null() {
            return Err(null("predicted"));
        }
        if target.is_null() {
            return Err(null("target"));
        }
        let p = std::slice::from_raw_parts(predicted, len);
        let t = std::slice::from_raw_parts(target, len);
        cm.cm.update(p, t)?;
        Ok(())
    })
}

/// IoU of one class. Writes NaN when the class appears in neither prediction nor target.
///
/// # Safety
/// `cm` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_confusion_class_iou(cm: *const SfConfusion, class: usize, out: *mut f64) -> SfStatus {
    guard(|| {
        let cm = cm.as_ref().ok_or_else(|| null("cm"))?;
        let out = out_arg(out, "out")?;
        if class >= cm.cm.num_classes() {
            return Err(invalid(format!("class {class} out of range for {} classes", cm.cm.num_classes())));
        }
        *out = cm.cm.class_iou(class).unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Mean IoU over the classes that appear in prediction or target.
///
/// # Safety
/// `cm` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_confusion_mean_iou(cm: *const SfConfusion, out: *mut f64) -> SfStatus {
    guard(|| {
        let cm = cm.as_ref().ok_or_else(|| null("cm"))?;
        let out = out_arg(out, "out")?;
        *out = cm.cm.mean_iou()?;
        Ok(())
    })
}
