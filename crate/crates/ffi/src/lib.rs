//! C ABI for loading a checkpoint, stylizing raw RGB8 images and reading
//! semantic directions.
//!
//! Every call returns an [`SfStatus`]. On failure the message is available
//! from [`sf_last_error_message`] on the same thread until the next call.
//! Panics never cross the boundary; they surface as `SF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use stylefuse::checkpoint::load_checkpoint;
use stylefuse::{Error, Gates, ImageTensor, StyleModel, StyleWeightVector, StylizeParams};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotFound = 3,
    Io = 4,
    Integrity = 5,
    IncompatibleVersion = 6,
    Numerical = 7,
    Internal = 8,
    Panic = 9,
}

/// Opaque model handle.
pub struct SfModel {
    model: StyleModel,
}

/// Stylization controls. `weights` points to `n_weights` values in [0, 1];
/// `n_weights` is either 1 (broadcast) or the layer count.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SfStylizeParams {
    pub weights: *const f64,
    pub n_weights: usize,
    pub sigma: f64,
    /// When false the checkpoint's configured gate is used.
    pub override_gamma1: bool,
    pub gamma1: f64,
    pub override_gamma2: bool,
    pub gamma2: f64,
    /// Negative means the principal direction.
    pub direction_rank: i64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SfStatus {
    match e {
        Error::Validation(_) | Error::Decode { .. } | Error::Config(_) => SfStatus::InvalidArgument,
        Error::NotFound(_) => SfStatus::NotFound,
        Error::Io { .. } => SfStatus::Io,
        Error::Integrity(_) => SfStatus::Integrity,
        Error::IncompatibleVersion { .. } => SfStatus::IncompatibleVersion,
        Error::Numerical { .. } => SfStatus::Numerical,
        _ => SfStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (SfStatus, String)>) -> SfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SfStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            SfStatus::Panic
        }
    }
}

fn lib(e: Error) -> (SfStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SfStatus, String) {
    (SfStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (SfStatus, String) {
    (SfStatus::InvalidArgument, msg.into())
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next `sf_` call on the same thread.
#[no_mangle]
pub extern "C" fn sf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_model_load(path: *const c_char, out: *mut *mut SfModel) -> SfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if path.is_null() {
            return Err(null("path"));
        }
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let model = load_checkpoint(path).map_err(lib)?;
        unsafe { *out = Box::into_raw(Box::new(SfModel { model })) };
        Ok(())
    })
}

/// Releases a handle from `sf_model_load`. NULL is ignored.
///
/// # Safety
/// `model` must come from `sf_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sf_model_free(model: *mut SfModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Image side length in pixels, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sf_model_resolution(model: *const SfModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.model.config.model.resolution)
}

/// Number of synthesis layers (length of the weight vector), or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sf_model_layers(model: *const SfModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.model.n_layers())
}

/// Latent dimension, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sf_model_latent_dim(model: *const SfModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.model.generator.d_latent())
}

unsafe fn read_params(p: &SfStylizeParams, layers: usize) -> Result<StylizeParams, (SfStatus, String)> {
    if p.weights.is_null() {
        return Err(null("params.weights"));
    }
    let raw = unsafe { std::slice::from_raw_parts(p.weights, p.n_weights) };
    let weights = match raw {
        [w] => StyleWeightVector::filled(*w, layers),
        _ if raw.len() == layers => StyleWeightVector::new(raw.to_vec()),
        _ => return Err(invalid(format!("got {} weights, model has {layers} layers", raw.len()))),
    }
    .map_err(lib)?;
    let mut out = StylizeParams::new(weights);
    out.sigma = p.sigma;
    out.gates = Gates {
        gamma1: p.override_gamma1.then_some(p.gamma1),
        gamma2: p.override_gamma2.then_some(p.gamma2),
    };
    out.direction_rank = usize::try_from(p.direction_rank).ok();
    Ok(out)
}

/// Stylizes an interleaved RGB8 image of `resolution^2 * 3` bytes into
/// `out_rgb`, which must hold as many. `style_rgb` may be NULL to take the
/// extrinsic style from the content image.
///
/// # Safety
/// Buffers must be valid for the stated lengths; `params` must be readable.
#[no_mangle]
pub unsafe extern "C" fn sf_stylize(
    model: *const SfModel,
    content_rgb: *const u8,
    style_rgb: *const u8,
    len: usize,
    params: *const SfStylizeParams,
    out_rgb: *mut u8,
    out_len: usize,
) -> SfStatus {
    guard(|| {
        let m = &unsafe { model.as_ref() }.ok_or_else(|| null("model"))?.model;
        let p = unsafe { params.as_ref() }.ok_or_else(|| null("params"))?;
        if content_rgb.is_null() {
            return Err(null("content_rgb"));
        }
        if out_rgb.is_null() {
            return Err(null("out_rgb"));
        }
        let res = m.config.model.resolution;
        let expected = 3 * res * res;
        if len != expected || out_len != expected {
            return Err(invalid(format!("buffers must hold {expected} bytes")));
        }
        let content = ImageTensor::from_rgb8_bytes(unsafe { std::slice::from_raw_parts(content_rgb, len) }, res).map_err(lib)?;
        let style = if style_rgb.is_null() {
            None
        } else {
            Some(ImageTensor::from_rgb8_bytes(unsafe { std::slice::from_raw_parts(style_rgb, len) }, res).map_err(lib)?)
        };
        let params = unsafe { read_params(p, m.n_layers()) }?;
        let result = m.stylize(&content, style.as_ref(), &params).map_err(lib)?;
        unsafe { std::slice::from_raw_parts_mut(out_rgb, out_len) }.copy_from_slice(&result.to_rgb8_bytes());
        Ok(())
    })
}

/// Writes the top `top` directions: eigenvalues into `values[top]` and unit
/// vectors, one per row, into `vectors[top * latent_dim]`.
///
/// # Safety
/// Output buffers must be writable for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn sf_factorize(
    model: *const SfModel,
    top: usize,
    values: *mut f64,
    vectors: *mut f64,
    vectors_len: usize,
) -> SfStatus {
    guard(|| {
        let m = &unsafe { model.as_ref() }.ok_or_else(|| null("model"))?.model;
        if values.is_null() || vectors.is_null() {
            return Err(null("output buffer"));
        }
        let d = m.generator.d_latent();
        if vectors_len != top * d {
            return Err(invalid(format!("vectors must hold top * {d} values")));
        }
        let dirs = m.directions(top).map_err(lib)?;
        let values = unsafe { std::slice::from_raw_parts_mut(values, top) };
        let vectors = unsafe { std::slice::from_raw_parts_mut(vectors, vectors_len) };
        for (i, dir) in dirs.iter().enumerate() {
            values[i] = dir.eigenvalue;
            vectors[i * d..(i + 1) * d].copy_from_slice(&dir.vector);
        }
        Ok(())
    })
}
