//! C ABI for loading a trained checkpoint and scoring SR/HR image pairs.
//!
//! Conventions: every function returns a status code (`PBAN_STATUS_*`,
//! matching the CLI's exit codes); results come back through out-pointers;
//! the model is an opaque handle owned by the library. On failure,
//! `pban_last_error` returns a thread-local message that stays valid until
//! the next call from the same thread. Null pointers are rejected with
//! `PBAN_STATUS_USAGE`; panics are caught at the boundary and reported as
//! `PBAN_STATUS_NUMERIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use pban_core::data::{load_checkpoint, read_image, ImageRGB};
use pban_core::model::{NamedWeights, PBANConfig};
use pban_core::tensor::Tensor;
use pban_core::training::predict_image;
use pban_core::{PbanError, Result};

/// Success.
pub const PBAN_STATUS_OK: i32 = 0;
/// Invalid argument: null pointer, bad UTF-8, malformed parameter.
pub const PBAN_STATUS_USAGE: i32 = 1;
/// Unreadable or inconsistent data (file, image, checkpoint).
pub const PBAN_STATUS_DATA: i32 = 2;
/// Numeric failure (non-finite value, undefined result, internal panic).
pub const PBAN_STATUS_NUMERIC: i32 = 3;

/// Opaque handle to a loaded model: the checkpoint's weights plus the
/// architecture config it was saved with.
pub struct PbanModel {
    weights: NamedWeights<f32>,
    config: PBANConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    // Interior NULs cannot survive a CString; replace them.
    let clean: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    let text = CString::new(clean).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = text);
}

fn fail(e: &PbanError) -> i32 {
    set_error(&e.to_string());
    e.exit_code()
}

fn usage(msg: &str) -> i32 {
    set_error(msg);
    PBAN_STATUS_USAGE
}

/// Runs `f` with panics converted to `PBAN_STATUS_NUMERIC` so unwinding
/// never crosses the C boundary.
fn guarded(f: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic");
            PBAN_STATUS_NUMERIC
        }
    }
}

/// Borrows a C string as &str, or reports which argument was bad.
///
/// # Safety
/// `ptr` must be null or point to a NUL-terminated string.
unsafe fn arg_str<'a>(ptr: *const c_char, name: &str) -> std::result::Result<&'a str, i32> {
    if ptr.is_null() {
        return Err(usage(&format!("{name} must not be null")));
    }
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| usage(&format!("{name} is not valid UTF-8")))
}

/// Message for the most recent failure on this thread, empty if none.
/// The pointer is invalidated by the next library call from this thread.
#[no_mangle]
pub extern "C" fn pban_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a checkpoint from `path` into a fresh model handle written to
/// `out_model`. The handle must be released with `pban_model_free`.
#[no_mangle]
pub extern "C" fn pban_model_load(path: *const c_char, out_model: *mut *mut PbanModel) -> i32 {
    guarded(|| {
        if out_model.is_null() {
            return usage("out_model must not be null");
        }
        let path = match unsafe { arg_str(path, "path") } {
            Ok(s) => s,
            Err(code) => return code,
        };
        match load_checkpoint(Path::new(path)) {
            Ok((weights, config)) => {
                let handle = Box::new(PbanModel { weights, config });
                unsafe { *out_model = Box::into_raw(handle) };
                PBAN_STATUS_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Releases a handle returned by `pban_model_load`. Null is a no-op.
#[no_mangle]
pub extern "C" fn pban_model_free(model: *mut PbanModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

fn score_into(
    model: *const PbanModel,
    out_score: *mut f64,
    images: impl FnOnce() -> Result<(ImageRGB, ImageRGB)>,
) -> i32 {
    if model.is_null() {
        return usage("model must not be null");
    }
    if out_score.is_null() {
        return usage("out_score must not be null");
    }
    let model = unsafe { &*model };
    let run = || -> Result<f64> {
        let (sr, hr) = images()?;
        predict_image(&model.weights, &model.config, &sr, &hr)
    };
    match run() {
        Ok(score) => {
            unsafe { *out_score = score };
            PBAN_STATUS_OK
        }
        Err(e) => fail(&e),
    }
}

/// Scores the SR image at `sr_path` against the HR reference at `hr_path`
/// (PNG or binary PPM, equal dimensions) and writes the patch-average
/// prediction to `out_score`.
#[no_mangle]
pub extern "C" fn pban_score_paths(
    model: *const PbanModel,
    sr_path: *const c_char,
    hr_path: *const c_char,
    out_score: *mut f64,
) -> i32 {
    guarded(|| {
        let sr = match unsafe { arg_str(sr_path, "sr_path") } {
            Ok(s) => s.to_owned(),
            Err(code) => return code,
        };
        let hr = match unsafe { arg_str(hr_path, "hr_path") } {
            Ok(s) => s.to_owned(),
            Err(code) => return code,
        };
        score_into(model, out_score, || {
            Ok((read_image(Path::new(&sr))?, read_image(Path::new(&hr))?))
        })
    })
}

fn image_from_rgb8(data: &[u8], width: usize, height: usize) -> Result<ImageRGB> {
    let plane = width * height;
    let pixels = Tensor::from_fn(&[3, height, width], |i| {
        let (c, p) = (i / plane, i % plane);
        data[p * 3 + c] as f32 / 255.0
    });
    ImageRGB::from_pixels(pixels)
}

/// Scores a pair of interleaved 8-bit RGB buffers (row-major, 3 bytes per
/// pixel, both images the same size) and writes the patch-average
/// prediction to `out_score`. Unsafe contract: `sr_rgb` and `hr_rgb` must
/// each point to at least `width * height * 3` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn pban_score_rgb(
    model: *const PbanModel,
    sr_rgb: *const u8,
    hr_rgb: *const u8,
    width: usize,
    height: usize,
    out_score: *mut f64,
) -> i32 {
    guarded(|| {
        if sr_rgb.is_null() || hr_rgb.is_null() {
            return usage("image buffers must not be null");
        }
        if width == 0 || height == 0 {
            return usage("image dimensions must be positive");
        }
        let n = match width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(3))
        {
            Some(n) => n,
            None => return usage("image dimensions overflow"),
        };
        let sr = unsafe { std::slice::from_raw_parts(sr_rgb, n) };
        let hr = unsafe { std::slice::from_raw_parts(hr_rgb, n) };
        score_into(model, out_score, || {
            Ok((
                image_from_rgb8(sr, width, height)?,
                image_from_rgb8(hr, width, height)?,
            ))
        })
    })
}
