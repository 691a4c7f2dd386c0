//! C interface to the segmentation engine.
//!
//! Every function returns a [`LasnetStatus`]; on failure a description is
//! available from [`lasnet_last_error`] on the same thread. Objects are
//! opaque handles released with their `_free` function. Panics never cross
//! the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use lasnet::config::NetworkConfig;
use lasnet::data::gt::{derive_gt_eg, derive_gt_loc};
use lasnet::labels::LabelMap;
use lasnet::metrics::ConfusionMatrix;
use lasnet::net::Model;
use lasnet::params::ParamStore;
use lasnet::tensor::{Shape, Tensor};
use lasnet::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LasnetStatus {
    Ok = 0,
    /// Null pointer, bad size, out-of-range label or invalid configuration.
    InvalidArgument = 1,
    /// Tensor shapes do not fit together.
    Shape = 2,
    /// File missing, unreadable or malformed.
    Io = 3,
    /// A non-finite value appeared.
    Numeric = 4,
    /// An internal panic was caught.
    Panic = 5,
}

/// A network configuration with its parameters.
pub struct LasnetModel {
    model: Model,
}

/// Confusion matrix accumulated over predictions.
pub struct LasnetConfusion {
    cm: ConfusionMatrix,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LasnetStatus {
    match e {
        Error::ShapeMismatch { .. } => LasnetStatus::Shape,
        Error::NonFinite(_) | Error::CheckFailed(_) => LasnetStatus::Numeric,
        Error::Io { .. } | Error::Image { .. } | Error::Format(_) | Error::Data(_) => LasnetStatus::Io,
        _ => LasnetStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic for `lasnet_last_error`.
fn guard(f: impl FnOnce() -> Result<(), (LasnetStatus, String)>) -> LasnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LasnetStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            LasnetStatus::Panic
        }
    }
}

fn lift<T>(r: lasnet::Result<T>) -> Result<T, (LasnetStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn invalid(msg: impl Into<String>) -> (LasnetStatus, String) {
    (LasnetStatus::InvalidArgument, msg.into())
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), (LasnetStatus, String)> {
    if p.is_null() {
        Err(invalid(format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, (LasnetStatus, String)> {
    non_null(p, name)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Configuration from optional JSON (NULL selects the compact preset).
unsafe fn config_arg(json: *const c_char, num_classes: u32) -> Result<NetworkConfig, (LasnetStatus, String)> {
    let mut config = if json.is_null() {
        NetworkConfig::desk()
    } else {
        let s = CStr::from_ptr(json)
            .to_str()
            .map_err(|_| invalid("config JSON is not UTF-8"))?;
        serde_json::from_str(s).map_err(|e| invalid(format!("config JSON: {e}")))?
    };
    if num_classes != 0 {
        config.num_classes = num_classes as usize;
    }
    lift(config.validate())?;
    Ok(config)
}

/// Message for the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn lasnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lasnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a model with freshly initialised parameters.
///
/// `config_json` may be NULL for the compact preset; a nonzero `num_classes`
/// overrides the class count.
///
/// # Safety
/// `config_json` must be NULL or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lasnet_model_new(
    config_json: *const c_char,
    num_classes: u32,
    seed: u64,
    out: *mut *mut LasnetModel,
) -> LasnetStatus {
    guard(|| {
        non_null(out, "out")?;
        let config = config_arg(config_json, num_classes)?;
        let model = lift(Model::init(config, seed))?;
        *out = Box::into_raw(Box::new(LasnetModel { model }));
        Ok(())
    })
}

/// Loads parameters written by [`lasnet_model_save`] or the command-line tool.
///
/// # Safety
/// String arguments must be NULL (config only) or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lasnet_model_load(
    config_json: *const c_char,
    num_classes: u32,
    path: *const c_char,
    out: *mut *mut LasnetModel,
) -> LasnetStatus {
    guard(|| {
        non_null(out, "out")?;
        let config = config_arg(config_json, num_classes)?;
        let path = path_arg(path, "path")?;
        let params = lift(ParamStore::load(&path))?;
        let model = lift(Model::new(config, params))?;
        *out = Box::into_raw(Box::new(LasnetModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lasnet_model_save(model: *const LasnetModel, path: *const c_char) -> LasnetStatus {
    guard(|| {
        non_null(model, "model")?;
        let path = path_arg(path, "path")?;
        lift((*model).model.params.save(&path))
    })
}

/// # Safety
/// `model` must be NULL or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn lasnet_model_num_classes(model: *const LasnetModel) -> u32 {
    if model.is_null() {
        0
    } else {
        (*model).model.config.num_classes as u32
    }
}

/// Segments one image pair.
///
/// `rgb` holds `3 × height × width` planar values in [0, 1], `tir` holds
/// `height × width`; `labels` receives `height × width` class indices.
/// Height and width must be positive multiples of 32.
///
/// # Safety
/// Buffers must have the stated lengths; `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lasnet_model_predict(
    model: *const LasnetModel,
    rgb: *const f64,
    tir: *const f64,
    height: usize,
    width: usize,
    labels: *mut u8,
) -> LasnetStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(rgb, "rgb")?;
        non_null(tir, "tir")?;
        non_null(labels, "labels")?;
        let plane = height
            .checked_mul(width)
            .filter(|&p| p > 0 && p <= isize::MAX as usize / 24)
            .ok_or_else(|| invalid(format!("bad image size {height}×{width}")))?;
        let model = &(*model).model;
        lift(model.config.check_input_size(height, width))?;
        let rgb = lift(Tensor::from_vec(
            Shape::new(1, 3, height, width),
            std::slice::from_raw_parts(rgb, 3 * plane).to_vec(),
        ))?;
        let tir = lift(Tensor::from_vec(
            Shape::new(1, 1, height, width),
            std::slice::from_raw_parts(tir, plane).to_vec(),
        ))?;
        let pred = lift(model.predict(&rgb, &tir))?;
        std::slice::from_raw_parts_mut(labels, plane).copy_from_slice(pred.data());
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lasnet_model_free(model: *mut LasnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lasnet_confusion_new(num_classes: u32, out: *mut *mut LasnetConfusion) -> LasnetStatus {
    guard(|| {
        non_null(out, "out")?;
        if !(1..=256).contains(&num_classes) {
            return Err(invalid(format!("num_classes {num_classes} outside [1, 256]")));
        }
        *out = Box::into_raw(Box::new(LasnetConfusion {
            cm: ConfusionMatrix::new(num_classes as usize),
        }));
        Ok(())
    })
}

/// Adds `len` (prediction, ground truth) label pairs.
///
/// # Safety
/// `pred` and `gt` must each hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn lasnet_confusion_accumulate(
    cm: *mut LasnetConfusion,
    pred: *const u8,
    gt: *const u8,
    len: usize,
) -> LasnetStatus {
    guard(|| {
        non_null(cm, "cm")?;
        non_null(pred, "pred")?;
        non_null(gt, "gt")?;
        let p = lift(LabelMap::new(1, len, std::slice::from_raw_parts(pred, len).to_vec()))?;
        let g = lift(LabelMap::new(1, len, std::slice::from_raw_parts(gt, len).to_vec()))?;
        lift((*cm).cm.accumulate(&p, &g))
    })
}

/// Adds the counts of `other` into `cm`.
///
/// # Safety
/// Both must be live handles.
#[no_mangle]
pub unsafe extern "C" fn lasnet_confusion_merge(cm: *mut LasnetConfusion, other: *const LasnetConfusion) -> LasnetStatus {
    guard(|| {
        non_null(cm, "cm")?;
        non_null(other, "other")?;
        let other = (*other).cm.clone();
        lift((*cm).cm.merge(&other))
    })
}

/// Count of pixels with ground truth `gt` predicted as `pred`.
///
/// # Safety
/// `cm` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lasnet_confusion_get(
    cm: *const LasnetConfusion,
    gt: u32,
    pred: u32,
    out: *mut u64,
) -> LasnetStatus {
    guard(|| {
        non_null(cm, "cm")?;
        non_null(out, "out")?;
        let n = (*cm).cm.num_classes() as u32;
        if gt >= n || pred >= n {
            return Err(invalid(format!("index ({gt}, {pred}) outside {n} classes")));
        }
        *out = (*cm).cm.get(gt as usize, pred as usize);
        Ok(())
    })
}

/// Mean class accuracy and mean IoU in percent.
///
/// # Safety
/// `cm` must be a live handle; outputs may be NULL to skip them.
#[no_mangle]
pub unsafe extern "C" fn lasnet_confusion_scores(
    cm: *const LasnetConfusion,
    macc: *mut f64,
    miou: *mut f64,
) -> LasnetStatus {
    guard(|| {
        non_null(cm, "cm")?;
        if !macc.is_null() {
            *macc = (*cm).cm.macc();
        }
        if !miou.is_null() {
            *miou = (*cm).cm.miou();
        }
        Ok(())
    })
}

/// # Safety
/// `cm` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lasnet_confusion_free(cm: *mut LasnetConfusion) {
    if !cm.is_null() {
        drop(Box::from_raw(cm));
    }
}

/// Location (foreground) and edge targets of a `height × width` label map.
///
/// # Safety
/// `labels`, `loc` and `edge` must each hold `height × width` bytes.
#[no_mangle]
pub unsafe extern "C" fn lasnet_derive_gt(
    labels: *const u8,
    height: usize,
    width: usize,
    edge_radius: u32,
    loc: *mut u8,
    edge: *mut u8,
) -> LasnetStatus {
    guard(|| {
        non_null(labels, "labels")?;
        non_null(loc, "loc")?;
        non_null(edge, "edge")?;
        if edge_radius == 0 {
            return Err(invalid("edge_radius must be at least 1"));
        }
        let len = height
            .checked_mul(width)
            .ok_or_else(|| invalid("size overflow"))?;
        let sem = lift(LabelMap::new(height, width, std::slice::from_raw_parts(labels, len).to_vec()))?;
        std::slice::from_raw_parts_mut(loc, len).copy_from_slice(derive_gt_loc(&sem).data());
        std::slice::from_raw_parts_mut(edge, len).copy_from_slice(derive_gt_eg(&sem, edge_radius as usize).data());
        Ok(())
    })
}
