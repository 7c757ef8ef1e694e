//! C interface to the deraining network.
//!
//! Models are opaque `DpafModel` handles created by `dpaf_model_load` or
//! `dpaf_model_new` and released with `dpaf_model_free`. Every fallible
//! function returns a `DpafStatus`; on failure a description is available
//! from `dpaf_last_error_message` on the same thread. Images cross the
//! boundary as planar `float` buffers of `3 * height * width` values in
//! `[0, 1]`, channel-major (all red, then green, then blue).
//!
//! Panics never unwind into the caller; they surface as `DPAF_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use dpafnet::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use dpafnet::objective::{psnr, ssim, SsimConfig};
use dpafnet::rain::Image;
use dpafnet::{Error, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DpafStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument was out of range or inconsistent (sizes, pixel values,
    /// non-UTF-8 paths).
    InvalidArgument = 2,
    /// Tensor shapes did not fit the model.
    Shape = 3,
    /// The file could not be read or written.
    Io = 4,
    /// The file was read but is not a valid checkpoint.
    Format = 5,
    /// The model configuration is invalid.
    Config = 6,
    /// An internal error, including a caught panic.
    Internal = 7,
}

/// A trained or freshly initialized network.
pub struct DpafModel {
    model: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> DpafStatus {
    match e {
        Error::Shape(_) => DpafStatus::Shape,
        Error::Param(_) | Error::Lookup(_) => DpafStatus::InvalidArgument,
        Error::Config(_) => DpafStatus::Config,
        Error::Format { .. } => DpafStatus::Format,
        Error::Io { .. } => DpafStatus::Io,
        _ => DpafStatus::Internal,
    }
}

struct Fail(DpafStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DpafStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            DpafStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            DpafStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(DpafStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DpafStatus::InvalidArgument, format!("`{what}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn image_len(height: usize, width: usize) -> Result<usize, Fail> {
    if height == 0 || width == 0 {
        return Err(Fail(DpafStatus::InvalidArgument, format!("image size {height}x{width} is empty")));
    }
    height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Fail(DpafStatus::InvalidArgument, "image size overflows".into()))
}

unsafe fn planar(ptr: *const f32, height: usize, width: usize, what: &str) -> Result<Tensor<f64>, Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let len = image_len(height, width)?;
    let data = std::slice::from_raw_parts(ptr, len).iter().map(|&v| v as f64).collect();
    Ok(Tensor::new([1, 3, height, width], data)?)
}

/// Loads a checkpoint file. On success `*out` receives a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dpaf_model_load(path: *const c_char, out: *mut *mut DpafModel) -> DpafStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let ckpt = load_checkpoint::<f32>(&path)?;
        *out = Box::into_raw(Box::new(DpafModel { model: ckpt.model }));
        Ok(())
    })
}

/// Builds a freshly initialized model. `config_json` is a JSON object with
/// any subset of the architecture keys, or null for the default network.
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dpaf_model_new(config_json: *const c_char, seed: u64, out: *mut *mut DpafModel) -> DpafStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = if config_json.is_null() {
            ModelConfig::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| Fail(DpafStatus::InvalidArgument, "`config_json` is not valid UTF-8".into()))?;
            serde_json::from_str(text).map_err(|e| Fail(DpafStatus::Config, format!("model configuration: {e}")))?
        };
        let model = Model::<f32>::build(&config, seed)?;
        *out = Box::into_raw(Box::new(DpafModel { model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dpaf_model_free(model: *mut DpafModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dpaf_model_num_params(model: *const DpafModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.num_params())
}

/// Writes the model as a checkpoint (without optimizer state).
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dpaf_model_save(model: *const DpafModel, path: *const c_char) -> DpafStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = path_arg(path, "path")?;
        save_checkpoint(&path, &m.model, &[])?;
        Ok(())
    })
}

/// Derains one image of any size. `input` and `output` hold
/// `3 * height * width` planar values; they may not overlap.
///
/// # Safety
/// `model` must be a live handle; both buffers must have the stated length.
#[no_mangle]
pub unsafe extern "C" fn dpaf_model_derain(
    model: *const DpafModel,
    input: *const f32,
    height: usize,
    width: usize,
    output: *mut f32,
) -> DpafStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if output.is_null() {
            return Err(null("output"));
        }
        let x = planar(input, height, width, "input")?;
        let img = Image::new(height, width, x.into_data())?;
        let y = m.model.derain(&img)?;
        let out = std::slice::from_raw_parts_mut(output, image_len(height, width)?);
        for (o, v) in out.iter_mut().zip(y.data()) {
            *o = *v as f32;
        }
        Ok(())
    })
}

/// PSNR in dB with peak value 1 between two planar images. Identical
/// images give positive infinity.
///
/// # Safety
/// Both buffers must hold `3 * height * width` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dpaf_psnr(a: *const f32, b: *const f32, height: usize, width: usize, out: *mut f64) -> DpafStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = psnr(&planar(a, height, width, "a")?, &planar(b, height, width, "b")?, 1.0)?;
        Ok(())
    })
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5) over the three channels.
/// Both sides must be at least 11 pixels.
///
/// # Safety
/// Both buffers must hold `3 * height * width` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dpaf_ssim(a: *const f32, b: *const f32, height: usize, width: usize, out: *mut f64) -> DpafStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ssim(&planar(a, height, width, "a")?, &planar(b, height, width, "b")?, &SsimConfig::default())?;
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`) and returns the full message
/// length in bytes, excluding the terminator. An empty message means the
/// last call succeeded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dpaf_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Static, NUL-terminated name of a status code.
#[no_mangle]
pub extern "C" fn dpaf_status_name(status: DpafStatus) -> *const c_char {
    let s: &'static CStr = match status {
        DpafStatus::Ok => c"ok",
        DpafStatus::NullArgument => c"null argument",
        DpafStatus::InvalidArgument => c"invalid argument",
        DpafStatus::Shape => c"shape mismatch",
        DpafStatus::Io => c"i/o error",
        DpafStatus::Format => c"malformed file",
        DpafStatus::Config => c"invalid configuration",
        DpafStatus::Internal => c"internal error",
    };
    s.as_ptr()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dpaf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
