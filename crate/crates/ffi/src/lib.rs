//! C ABI over the immunity library.
//!
//! Handles are opaque pointers created by `imm_*_new`/`imm_*_load` and
//! released with the matching `*_free`. Every fallible function returns an
//! [`ImmStatus`]; on failure the message is available from
//! [`imm_last_error`] on the same thread until the next failing call.
//! Images are row-major `height x width x 3` buffers, masks are
//! `height x width` bytes where any non-zero value marks a protected pixel.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use immunity::data::{RasterImage, RegionMask};
use immunity::eval;
use immunity::immunizer::{Immunize, ImmunizerConfig, ImmunizerModel};
use immunity::Error;
use ndarray::Array3;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    ArtifactMissing = 4,
    Version = 5,
    Io = 6,
    Internal = 7,
    Panic = 8,
}

/// Opaque immunizer handle.
pub struct ImmImmunizer {
    model: ImmunizerModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ImmStatus {
    match e {
        Error::Shape(_) | Error::DegenerateMask(_) | Error::FrameMismatch(_) => ImmStatus::Shape,
        Error::ArtifactMissing(_) | Error::Decode { .. } => ImmStatus::ArtifactMissing,
        Error::Version(_) => ImmStatus::Version,
        Error::Io(_) => ImmStatus::Io,
        Error::Config(_) | Error::InvalidArgument(_) => ImmStatus::InvalidArgument,
        _ => ImmStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (ImmStatus, String)>) -> ImmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ImmStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ImmStatus::Panic
        }
    }
}

fn lift(e: Error) -> (ImmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (ImmStatus, String) {
    (ImmStatus::NullPointer, format!("`{what}` is null"))
}

fn dims(height: u32, width: u32) -> Result<(usize, usize), (ImmStatus, String)> {
    let (h, w) = (height as usize, width as usize);
    h.checked_mul(w)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| (ImmStatus::InvalidArgument, "image size overflows".to_string()))?;
    Ok((h, w))
}

/// # Safety
/// `ptr` must point to `h * w * 3` readable doubles.
unsafe fn read_image(ptr: *const f64, h: usize, w: usize, what: &str) -> Result<RasterImage, (ImmStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let data = std::slice::from_raw_parts(ptr, h * w * 3).to_vec();
    let arr = Array3::from_shape_vec((h, w, 3), data).map_err(|e| (ImmStatus::Shape, e.to_string()))?;
    RasterImage::new(arr).map_err(lift)
}

/// # Safety
/// `ptr` must point to `h * w` readable bytes.
unsafe fn read_mask(ptr: *const u8, h: usize, w: usize) -> Result<RegionMask, (ImmStatus, String)> {
    if ptr.is_null() {
        return Err(null("mask"));
    }
    let data = std::slice::from_raw_parts(ptr, h * w);
    Ok(RegionMask::from_fn(h, w, |y, x| data[y * w + x] != 0))
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string.
unsafe fn read_path(ptr: *const c_char) -> Result<PathBuf, (ImmStatus, String)> {
    if ptr.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| (ImmStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn imm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn imm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a freshly initialized immunizer.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn imm_immunizer_new(
    depth: u32,
    base_width: u32,
    eps_max: f64,
    seed: u64,
    out: *mut *mut ImmImmunizer,
) -> ImmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ImmunizerConfig {
            depth: depth as usize,
            base_width: base_width as usize,
            eps_max,
            seed,
        };
        let model = ImmunizerModel::new(cfg).map_err(lift)?;
        *out = Box::into_raw(Box::new(ImmImmunizer { model }));
        Ok(())
    })
}

/// Loads an immunizer checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn imm_immunizer_load(path: *const c_char, out: *mut *mut ImmImmunizer) -> ImmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = read_path(path)?;
        let model = ImmunizerModel::load_checkpoint(&p).map_err(lift)?;
        *out = Box::into_raw(Box::new(ImmImmunizer { model }));
        Ok(())
    })
}

/// Writes the immunizer to a checkpoint file.
///
/// # Safety
/// `handle` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn imm_immunizer_save(handle: *const ImmImmunizer, path: *const c_char) -> ImmStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let p = read_path(path)?;
        h.model.save_checkpoint(&p).map_err(lift)
    })
}

/// Noise bound of the immunizer.
///
/// # Safety
/// `handle` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn imm_immunizer_eps_max(handle: *const ImmImmunizer, out: *mut f64) -> ImmStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = h.model.config().eps_max;
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `handle` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn imm_immunizer_free(handle: *mut ImmImmunizer) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Immunizes a `[0, 1]` float image; `out` receives `height * width * 3`
/// doubles.
///
/// # Safety
/// Buffers must have the documented sizes; `out` may not alias `image`.
#[no_mangle]
pub unsafe extern "C" fn imm_immunize(
    handle: *const ImmImmunizer,
    image: *const f64,
    mask: *const u8,
    height: u32,
    width: u32,
    out: *mut f64,
) -> ImmStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (hh, ww) = dims(height, width)?;
        let img = read_image(image, hh, ww, "image")?;
        let m = read_mask(mask, hh, ww)?;
        let res = h.model.immunize(&img, &m).map_err(lift)?;
        let dst = std::slice::from_raw_parts_mut(out, hh * ww * 3);
        for (d, s) in dst.iter_mut().zip(res.pixels().iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// Immunizes an 8-bit RGB image; `out` receives `height * width * 3` bytes.
///
/// # Safety
/// Buffers must have the documented sizes.
#[no_mangle]
pub unsafe extern "C" fn imm_immunize_rgb8(
    handle: *const ImmImmunizer,
    rgb: *const u8,
    mask: *const u8,
    height: u32,
    width: u32,
    out: *mut u8,
) -> ImmStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let (hh, ww) = dims(height, width)?;
        let bytes = std::slice::from_raw_parts(rgb, hh * ww * 3).to_vec();
        let buf = image::RgbImage::from_raw(width, height, bytes)
            .ok_or_else(|| (ImmStatus::Shape, "buffer does not match dimensions".to_string()))?;
        let img = RasterImage::from_rgb8(&buf).map_err(lift)?;
        let m = read_mask(mask, hh, ww)?;
        let res = h.model.immunize(&img, &m).map_err(lift)?;
        let dst = std::slice::from_raw_parts_mut(out, hh * ww * 3);
        dst.copy_from_slice(res.image().to_rgb8().as_raw());
        Ok(())
    })
}

type Metric = fn(&RasterImage, &RasterImage) -> immunity::Result<f64>;

unsafe fn metric(f: Metric, a: *const f64, b: *const f64, height: u32, width: u32, out: *mut f64) -> ImmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (h, w) = dims(height, width)?;
        let x = read_image(a, h, w, "a")?;
        let y = read_image(b, h, w, "b")?;
        *out = f(&x, &y).map_err(lift)?;
        Ok(())
    })
}

/// SSIM of two float images.
///
/// # Safety
/// `a` and `b` must hold `height * width * 3` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn imm_ssim(a: *const f64, b: *const f64, height: u32, width: u32, out: *mut f64) -> ImmStatus {
    metric(eval::ssim, a, b, height, width, out)
}

/// PSNR in dB (peak 1); identical images give +infinity.
///
/// # Safety
/// As for [`imm_ssim`].
#[no_mangle]
pub unsafe extern "C" fn imm_psnr(a: *const f64, b: *const f64, height: u32, width: u32, out: *mut f64) -> ImmStatus {
    metric(eval::psnr, a, b, height, width, out)
}

/// FSIM on luminance.
///
/// # Safety
/// As for [`imm_ssim`].
#[no_mangle]
pub unsafe extern "C" fn imm_fsim(a: *const f64, b: *const f64, height: u32, width: u32, out: *mut f64) -> ImmStatus {
    metric(eval::fsim, a, b, height, width, out)
}
