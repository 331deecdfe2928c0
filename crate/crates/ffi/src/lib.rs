//! C ABI over the `atroseg` library.
//!
//! Every function returns an [`AtrosegStatus`]; on failure a description is
//! available from [`atroseg_last_error`] until the next call on the same
//! thread. Models are owned through an opaque [`AtrosegCascade`] handle
//! released with [`atroseg_cascade_free`]. Rasters are row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use atroseg::metrics::{self, BinaryMask};
use atroseg::pipeline::{cascade_predict, check_cascade};
use atroseg::segnet::{load_checkpoint, Model};
use atroseg::{Error, Shape, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AtrosegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    BadCheckpoint = 4,
    ShapeMismatch = 5,
    UndefinedMetric = 6,
    Internal = 7,
}

/// A loaded cascade of stage models.
pub struct AtrosegCascade {
    models: Vec<Model<f32>>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> AtrosegStatus {
    match e {
        Error::Io { .. } => AtrosegStatus::Io,
        Error::BadMagic | Error::VersionMismatch { .. } | Error::Checksum | Error::MalformedCheckpoint(_) => {
            AtrosegStatus::BadCheckpoint
        }
        Error::Shape { .. } => AtrosegStatus::ShapeMismatch,
        Error::UndefinedMetric(_) => AtrosegStatus::UndefinedMetric,
        Error::Contract(_) | Error::Config(_) | Error::ConfigParse { .. } => AtrosegStatus::InvalidArgument,
        _ => AtrosegStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (AtrosegStatus, String)>) -> AtrosegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AtrosegStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AtrosegStatus::Internal
        }
    }
}

fn lift<T>(r: atroseg::Result<T>) -> Result<T, (AtrosegStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (AtrosegStatus, String) {
    (AtrosegStatus::NullPointer, format!("{what} is null"))
}

/// Message for the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn atroseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads `count` checkpoints in cascade order into `*out`.
///
/// # Safety
/// `paths` must point to `count` NUL-terminated strings; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn atroseg_cascade_load(
    paths: *const *const c_char,
    count: usize,
    out: *mut *mut AtrosegCascade,
) -> AtrosegStatus {
    guard(|| {
        if paths.is_null() {
            return Err(null("paths"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let mut models = Vec::with_capacity(count);
        for i in 0..count {
            let p = *paths.add(i);
            if p.is_null() {
                return Err(null("path"));
            }
            let path = CStr::from_ptr(p)
                .to_str()
                .map_err(|_| (AtrosegStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
            models.push(lift(load_checkpoint(path))?);
        }
        lift(check_cascade(&models))?;
        *out = Box::into_raw(Box::new(AtrosegCascade { models }));
        Ok(())
    })
}

/// Releases a cascade; null is ignored.
///
/// # Safety
/// `cascade` must come from [`atroseg_cascade_load`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn atroseg_cascade_free(cascade: *mut AtrosegCascade) {
    if !cascade.is_null() {
        drop(Box::from_raw(cascade));
    }
}

/// Number of stages in the cascade, 0 for null.
///
/// # Safety
/// `cascade` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn atroseg_cascade_stages(cascade: *const AtrosegCascade) -> usize {
    cascade.as_ref().map_or(0, |c| c.models.len())
}

/// Square input extent the models were trained at, 0 for null.
///
/// # Safety
/// `cascade` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn atroseg_cascade_input_size(cascade: *const AtrosegCascade) -> usize {
    cascade.as_ref().map_or(0, |c| c.models[0].config().input_size)
}

/// Foreground probabilities for a `height × width` image with values in
/// `[0,1]`. Other sizes than the input size are resized internally.
///
/// # Safety
/// `image` and `prob_out` must each hold `height·width` floats.
#[no_mangle]
pub unsafe extern "C" fn atroseg_cascade_predict(
    cascade: *const AtrosegCascade,
    image: *const f32,
    height: usize,
    width: usize,
    prob_out: *mut f32,
) -> AtrosegStatus {
    guard(|| {
        let c = cascade.as_ref().ok_or_else(|| null("cascade"))?;
        if image.is_null() {
            return Err(null("image"));
        }
        if prob_out.is_null() {
            return Err(null("prob_out"));
        }
        if height == 0 || width == 0 {
            return Err((AtrosegStatus::InvalidArgument, "empty image".into()));
        }
        let n = height * width;
        let pixels = std::slice::from_raw_parts(image, n).to_vec();
        let img = lift(Tensor::from_vec(Shape::new(1, 1, height, width), pixels))?;
        let p = lift(cascade_predict(&c.models, &img))?;
        std::slice::from_raw_parts_mut(prob_out, n).copy_from_slice(p.data());
        Ok(())
    })
}

unsafe fn masks(pred: *const u8, gt: *const u8, height: usize, width: usize) -> Result<(BinaryMask, BinaryMask), (AtrosegStatus, String)> {
    if pred.is_null() {
        return Err(null("pred"));
    }
    if gt.is_null() {
        return Err(null("gt"));
    }
    let n = height * width;
    let to_mask = |p: *const u8| {
        let bits = std::slice::from_raw_parts(p, n).iter().map(|&v| v != 0).collect();
        lift(BinaryMask::new(width, height, bits))
    };
    Ok((to_mask(pred)?, to_mask(gt)?))
}

unsafe fn metric(
    pred: *const u8,
    gt: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
    f: impl FnOnce(&BinaryMask, &BinaryMask) -> atroseg::Result<f64>,
) -> AtrosegStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (p, g) = masks(pred, gt, height, width)?;
        *out = lift(f(&p, &g))?;
        Ok(())
    })
}

/// Jaccard coefficient of two `height × width` masks (nonzero is
/// foreground).
///
/// # Safety
/// `pred` and `gt` must hold `height·width` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn atroseg_jaccard(pred: *const u8, gt: *const u8, height: usize, width: usize, out: *mut f64) -> AtrosegStatus {
    metric(pred, gt, height, width, out, metrics::jaccard)
}

/// Dice coefficient; arguments as [`atroseg_jaccard`].
///
/// # Safety
/// As [`atroseg_jaccard`].
#[no_mangle]
pub unsafe extern "C" fn atroseg_dice(pred: *const u8, gt: *const u8, height: usize, width: usize, out: *mut f64) -> AtrosegStatus {
    metric(pred, gt, height, width, out, metrics::dice)
}

/// Average contour distance scaled by `spacing`. Returns
/// `ATROSEG_STATUS_UNDEFINED_METRIC` when either boundary is empty.
///
/// # Safety
/// As [`atroseg_jaccard`].
#[no_mangle]
pub unsafe extern "C" fn atroseg_acd(
    pred: *const u8,
    gt: *const u8,
    height: usize,
    width: usize,
    spacing: f64,
    out: *mut f64,
) -> AtrosegStatus {
    metric(pred, gt, height, width, out, |p, g| {
        metrics::acd(&metrics::extract_boundary(p), &metrics::extract_boundary(g), spacing)
    })
}

/// Average surface distance scaled by `spacing`.
///
/// # Safety
/// As [`atroseg_jaccard`].
#[no_mangle]
pub unsafe extern "C" fn atroseg_asd(
    pred: *const u8,
    gt: *const u8,
    height: usize,
    width: usize,
    spacing: f64,
    out: *mut f64,
) -> AtrosegStatus {
    metric(pred, gt, height, width, out, |p, g| {
        metrics::asd(&metrics::extract_boundary(p), &metrics::extract_boundary(g), spacing)
    })
}
