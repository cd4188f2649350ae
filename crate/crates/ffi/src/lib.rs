//! C ABI over `acam-core`.
//!
//! Every function returns an [`AcamStatus`]. On failure the message is kept
//! per thread and read back with [`acam_last_error`]. Images and maps are
//! passed as channel-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use acam::attention::{otsu_binarize, AggregateOn, BBox};
use acam::backbone::{read_feature_maps, write_feature_maps};
use acam::eval::{attended_box, iou};
use acam::multiscale::{read_checkpoint, ForwardOptions, InferenceSettings, MultiScaleModel};
use acam::tensor::Tensor;
use acam::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcamStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    FormatError = 3,
    Io = 4,
    BufferTooSmall = 5,
    Panic = 6,
    Other = 7,
}

/// Opaque multi-scale model.
pub struct AcamModel {
    inner: MultiScaleModel,
}

/// Inclusive box; rows `top..=bottom`, columns `left..=right`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AcamBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

/// Inference settings a checkpoint is loaded with.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcamSettings {
    pub image_size: usize,
    pub otsu_bins: usize,
    pub margin_fraction: f64,
    /// Nonzero aggregates classifiers on logits instead of probabilities.
    pub aggregate_on_logits: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: AcamStatus, msg: impl Into<String>) -> AcamStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> AcamStatus {
    let status = match &e {
        Error::InvalidInput(_) => AcamStatus::InvalidInput,
        Error::Format { .. } | Error::Manifest { .. } | Error::Config { .. } => AcamStatus::FormatError,
        Error::Io { .. } => AcamStatus::Io,
        Error::NonFiniteLoss { .. } => AcamStatus::Other,
    };
    fail(status, format!("{}: {e}", e.category()))
}

/// Runs `f`, mapping errors and panics to a status.
fn guard(f: impl FnOnce() -> Result<(), AcamStatus>) -> AcamStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AcamStatus::Ok,
        Ok(Err(s)) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(AcamStatus::Panic, format!("panic: {msg}"))
        }
    }
}

fn check<T>(r: acam::Result<T>) -> Result<T, AcamStatus> {
    r.map_err(from_error)
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), AcamStatus> {
    if p.is_null() {
        Err(fail(AcamStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, AcamStatus> {
    non_null(p, "path")?;
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(AcamStatus::InvalidInput, "path is not valid UTF-8"))
}

unsafe fn tensor_arg(data: *const f64, c: usize, h: usize, w: usize) -> Result<Tensor, AcamStatus> {
    non_null(data, "data")?;
    let len = c
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .ok_or_else(|| fail(AcamStatus::InvalidInput, "extents overflow"))?;
    let values = std::slice::from_raw_parts(data, len).to_vec();
    check(Tensor::new(vec![c, h, w], values))
}

unsafe fn model_arg<'a>(model: *const AcamModel) -> Result<&'a MultiScaleModel, AcamStatus> {
    non_null(model, "model")?;
    Ok(&(*model).inner)
}

fn to_box(b: BBox) -> AcamBox {
    AcamBox {
        top: b.top,
        left: b.left,
        bottom: b.bottom,
        right: b.right,
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn acam_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn acam_settings_default() -> AcamSettings {
    let s = InferenceSettings::default();
    AcamSettings {
        image_size: s.image_size,
        otsu_bins: s.forward.otsu_bins,
        margin_fraction: s.forward.margin_fraction,
        aggregate_on_logits: 0,
    }
}

/// Loads a checkpoint. `*out` receives a handle to release with
/// [`acam_model_free`].
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn acam_model_load(path: *const c_char, settings: AcamSettings, out: *mut *mut AcamModel) -> AcamStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        if settings.image_size == 0 || settings.otsu_bins < 2 || !(settings.margin_fraction >= 0.0) {
            return Err(fail(AcamStatus::InvalidInput, "settings out of range"));
        }
        let settings = InferenceSettings {
            image_size: settings.image_size,
            forward: ForwardOptions {
                aggregate_on: if settings.aggregate_on_logits != 0 {
                    AggregateOn::Logits
                } else {
                    AggregateOn::Probs
                },
                otsu_bins: settings.otsu_bins,
                margin_fraction: settings.margin_fraction,
            },
        };
        let inner = check(read_checkpoint(&path, settings))?;
        *out = Box::into_raw(Box::new(AcamModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`acam_model_load`] and not be used afterwards.
/// Null is accepted.
#[no_mangle]
pub unsafe extern "C" fn acam_model_free(model: *mut AcamModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and the out pointers valid.
#[no_mangle]
pub unsafe extern "C" fn acam_model_info(model: *const AcamModel, scales: *mut usize, categories: *mut usize) -> AcamStatus {
    guard(|| {
        let m = model_arg(model)?;
        non_null(scales, "scales")?;
        non_null(categories, "categories")?;
        *scales = m.scales.len();
        *categories = m.categories();
        Ok(())
    })
}

/// Multi-scale class probabilities for one `c x h x w` image in `[0, 1]`.
/// `probs` must hold at least the model's category count.
///
/// # Safety
/// `pixels` must hold `c*h*w` values and `probs` `probs_len` values.
#[no_mangle]
pub unsafe extern "C" fn acam_predict(
    model: *const AcamModel,
    pixels: *const f64,
    c: usize,
    h: usize,
    w: usize,
    probs: *mut f64,
    probs_len: usize,
    label: *mut usize,
) -> AcamStatus {
    guard(|| {
        let m = model_arg(model)?;
        let image = tensor_arg(pixels, c, h, w)?;
        non_null(probs, "probs")?;
        non_null(label, "label")?;
        if probs_len < m.categories() {
            return Err(fail(
                AcamStatus::BufferTooSmall,
                format!("probs holds {probs_len}, need {}", m.categories()),
            ));
        }
        let pred = check(m.predict(&image))?;
        std::slice::from_raw_parts_mut(probs, pred.probs.len()).copy_from_slice(&pred.probs);
        *label = pred.label;
        Ok(())
    })
}

/// Attention map of scale `scale` (0-based) for one image, plus the scale-1
/// attended box in the image's own pixel coordinates.
///
/// `map_h`/`map_w` always receive the map extents; if `map_cap` is smaller
/// than their product the call returns `BufferTooSmall` and writes nothing
/// else.
///
/// # Safety
/// `pixels` must hold `c*h*w` values, `map` `map_cap` values (may be null
/// when `map_cap` is 0), and the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn acam_attention(
    model: *const AcamModel,
    pixels: *const f64,
    c: usize,
    h: usize,
    w: usize,
    scale: usize,
    map: *mut f64,
    map_cap: usize,
    map_h: *mut usize,
    map_w: *mut usize,
    attended: *mut AcamBox,
) -> AcamStatus {
    guard(|| {
        let m = model_arg(model)?;
        let image = tensor_arg(pixels, c, h, w)?;
        non_null(map_h, "map_h")?;
        non_null(map_w, "map_w")?;
        non_null(attended, "attended")?;
        if scale >= m.scales.len() {
            return Err(fail(
                AcamStatus::InvalidInput,
                format!("scale {scale} out of range for {} scales", m.scales.len()),
            ));
        }
        let pred = check(m.predict(&image))?;
        let a = &pred.per_scale[scale].artifacts.map;
        let (_, mh, mw) = check(a.dims3())?;
        *map_h = mh;
        *map_w = mw;
        if map_cap < mh * mw {
            return Err(fail(AcamStatus::BufferTooSmall, format!("map holds {map_cap}, need {}", mh * mw)));
        }
        non_null(map, "map")?;
        std::slice::from_raw_parts_mut(map, a.len()).copy_from_slice(a.data());
        *attended = to_box(attended_box(m, &pred, h, w));
        Ok(())
    })
}

/// Otsu binarization of an `h x w` map. `mask` receives `h*w` bytes (0/1);
/// `threshold` receives the cut level, or -1 for a constant map.
///
/// # Safety
/// `map` must hold `h*w` values and `mask` room for as many bytes.
#[no_mangle]
pub unsafe extern "C" fn acam_otsu(map: *const f64, h: usize, w: usize, bins: usize, mask: *mut u8, threshold: *mut i64) -> AcamStatus {
    guard(|| {
        let t = tensor_arg(map, 1, h, w)?;
        non_null(mask, "mask")?;
        non_null(threshold, "threshold")?;
        let r = check(otsu_binarize(&t, bins))?;
        std::slice::from_raw_parts_mut(mask, h * w).copy_from_slice(r.mask.data());
        *threshold = r.threshold.map_or(-1, |v| v as i64);
        Ok(())
    })
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn acam_iou(a: AcamBox, b: AcamBox, out: *mut f64) -> AcamStatus {
    guard(|| {
        non_null(out, "out")?;
        let a = check(BBox::new(a.top, a.left, a.bottom, a.right))?;
        let b = check(BBox::new(b.top, b.left, b.bottom, b.right))?;
        *out = check(iou(&a, &b))?;
        Ok(())
    })
}

/// Writes a `c x h x w` feature-map file.
///
/// # Safety
/// `path` must be nul-terminated and `data` hold `c*h*w` values.
#[no_mangle]
pub unsafe extern "C" fn acam_fmap_write(path: *const c_char, data: *const f64, c: usize, h: usize, w: usize) -> AcamStatus {
    guard(|| {
        let path = path_arg(path)?;
        let t = tensor_arg(data, c, h, w)?;
        check(write_feature_maps(&path, &t))
    })
}

/// Reads a feature-map file. `dims` always receives `[c, h, w]` of a
/// well-formed file; the values are copied only if `cap` suffices,
/// otherwise `BufferTooSmall` is returned.
///
/// # Safety
/// `path` must be nul-terminated, `dims` hold 3 values and `data` `cap`
/// values (may be null when `cap` is 0).
#[no_mangle]
pub unsafe extern "C" fn acam_fmap_read(path: *const c_char, data: *mut f64, cap: usize, dims: *mut usize) -> AcamStatus {
    guard(|| {
        let path = path_arg(path)?;
        non_null(dims, "dims")?;
        let t = check(read_feature_maps(&path))?;
        let (c, h, w) = check(t.dims3())?;
        std::slice::from_raw_parts_mut(dims, 3).copy_from_slice(&[c, h, w]);
        if cap < t.len() {
            return Err(fail(AcamStatus::BufferTooSmall, format!("buffer holds {cap}, need {}", t.len())));
        }
        non_null(data, "data")?;
        std::slice::from_raw_parts_mut(data, t.len()).copy_from_slice(t.data());
        Ok(())
    })
}
