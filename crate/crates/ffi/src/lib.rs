//! C ABI over `kgs-core`.
//!
//! Objects are opaque handles created by `*_new`/`*_read`/`*_load` functions
//! and released with the matching `*_free`. Every fallible call returns a
//! [`KgsStatus`]; on failure [`kgs_last_error`] describes the cause for the
//! calling thread. Panics never cross the boundary: they are reported as
//! `KGS_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use kgs_core::checkpoint;
use kgs_core::config::RunConfig;
use kgs_core::synth::{generate_dataset, preset, read_dataset, write_dataset, Dataset};
use kgs_core::train::{FrameMetrics, TrainState};
use kgs_core::Error;

/// Result codes; the non-zero values match the `kgs` CLI exit codes where
/// the categories overlap.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KgsStatus {
    Ok = 0,
    /// A required pointer was null or a string was not UTF-8.
    InvalidArgument = 1,
    /// Invalid configuration or input values.
    Config = 2,
    /// File missing, unreadable or malformed.
    Io = 3,
    /// Non-finite values during rendering or training.
    Numerical = 4,
    /// Internal panic caught at the boundary.
    Panic = 5,
}

/// A loaded or generated dataset.
pub struct KgsDataset {
    inner: Dataset,
}

/// A trainable scene model.
pub struct KgsModel {
    inner: TrainState,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> KgsStatus {
    match e.exit_code() {
        2 => KgsStatus::Config,
        3 => KgsStatus::Io,
        4 => KgsStatus::Numerical,
        _ => KgsStatus::Panic,
    }
}

struct Fail(KgsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(KgsStatus::InvalidArgument, msg.to_owned())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> KgsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            KgsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            KgsStatus::Panic
        }
    }
}

/// # Safety
/// `s` is null or a valid NUL-terminated string.
unsafe fn text<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` is null or points to a live `T` not aliased mutably elsewhere.
unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(&format!("{what} is null")))
}

/// # Safety
/// As [`borrow`], for exclusive access.
unsafe fn borrow_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| invalid(&format!("{what} is null")))
}

/// # Safety
/// `out` is null or valid for writing one value.
unsafe fn put<T>(out: *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(invalid("output pointer is null"));
    }
    out.write(v);
    Ok(())
}

/// Description of the calling thread's most recent failure, or an empty
/// string. Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn kgs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kgs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates one of the built-in scenes (`rolldice-lite`, `static-lite`,
/// `decomp`, `single`) in memory.
///
/// # Safety
/// `name` is a NUL-terminated string; `out` is valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn kgs_dataset_generate(name: *const c_char, seed: u64, out: *mut *mut KgsDataset) -> KgsStatus {
    guard(|| {
        let spec = preset(text(name, "name")?, seed)?;
        let inner = generate_dataset(&spec)?;
        put(out, Box::into_raw(Box::new(KgsDataset { inner })))
    })
}

/// Reads a dataset directory.
///
/// # Safety
/// `dir` is a NUL-terminated path; `out` is valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn kgs_dataset_read(dir: *const c_char, out: *mut *mut KgsDataset) -> KgsStatus {
    guard(|| {
        let inner = read_dataset(&PathBuf::from(text(dir, "dir")?))?;
        put(out, Box::into_raw(Box::new(KgsDataset { inner })))
    })
}

/// Writes a dataset directory.
///
/// # Safety
/// `data` is a live dataset handle; `dir` is a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn kgs_dataset_write(data: *const KgsDataset, dir: *const c_char) -> KgsStatus {
    guard(|| {
        let d = borrow(data, "data")?;
        write_dataset(&d.inner, &PathBuf::from(text(dir, "dir")?))?;
        Ok(())
    })
}

/// Frame count and image size of a dataset.
///
/// # Safety
/// `data` is a live dataset handle; the outputs are valid for writing.
#[no_mangle]
pub unsafe extern "C" fn kgs_dataset_shape(
    data: *const KgsDataset,
    frames: *mut usize,
    width: *mut u32,
    height: *mut u32,
) -> KgsStatus {
    guard(|| {
        let d = &borrow(data, "data")?.inner;
        put(frames, d.spec.frames)?;
        put(width, d.spec.camera.width)?;
        put(height, d.spec.camera.height)
    })
}

/// # Safety
/// `data` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kgs_dataset_free(data: *mut KgsDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Initializes a model for `data`. `config_json` is a flat dotted-key JSON
/// object of overrides, or null for the defaults.
///
/// # Safety
/// `data` is a live dataset handle; `config_json` is null or NUL-terminated;
/// `out` is valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn kgs_model_new(
    data: *const KgsDataset,
    config_json: *const c_char,
    out: *mut *mut KgsModel,
) -> KgsStatus {
    guard(|| {
        let d = borrow(data, "data")?;
        let cfg = if config_json.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_json_str(text(config_json, "config_json")?)?
        };
        let inner = TrainState::new(cfg, &d.inner)?;
        put(out, Box::into_raw(Box::new(KgsModel { inner })))
    })
}

/// Loads a `KGS1` checkpoint.
///
/// # Safety
/// `path` is NUL-terminated; `out` is valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn kgs_model_load(path: *const c_char, out: *mut *mut KgsModel) -> KgsStatus {
    guard(|| {
        let inner = checkpoint::load(&PathBuf::from(text(path, "path")?))?;
        put(out, Box::into_raw(Box::new(KgsModel { inner })))
    })
}

/// Saves a `KGS1` checkpoint.
///
/// # Safety
/// `model` is a live handle; `path` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn kgs_model_save(model: *const KgsModel, path: *const c_char) -> KgsStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        checkpoint::save(&m.inner, &PathBuf::from(text(path, "path")?))?;
        Ok(())
    })
}

/// Runs up to `steps` optimizer steps (stopping at the configured iteration
/// count) and reports the last step's loss through `last_loss` (may be
/// null). On a numerical failure the model keeps its pre-step state.
///
/// # Safety
/// `model` and `data` are live handles; `last_loss` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn kgs_model_train(
    model: *mut KgsModel,
    data: *const KgsDataset,
    steps: u64,
    last_loss: *mut f64,
) -> KgsStatus {
    guard(|| {
        let m = borrow_mut(model, "model")?;
        let d = borrow(data, "data")?;
        let mut loss = f64::NAN;
        for _ in 0..steps {
            if m.inner.iteration >= m.inner.config.train.iterations {
                break;
            }
            let before = m.inner.clone();
            match m.inner.step(&d.inner) {
                Ok(r) => loss = r.loss,
                Err(e) => {
                    m.inner = before;
                    return Err(e.into());
                }
            }
        }
        if !last_loss.is_null() {
            last_loss.write(loss);
        }
        Ok(())
    })
}

/// Current iteration, Gaussian count and dynamic Gaussian count.
///
/// # Safety
/// `model` is a live handle; the outputs are valid for writing.
#[no_mangle]
pub unsafe extern "C" fn kgs_model_stats(
    model: *const KgsModel,
    iteration: *mut u64,
    gaussians: *mut usize,
    dynamic: *mut usize,
) -> KgsStatus {
    guard(|| {
        let m = &borrow(model, "model")?.inner;
        put(iteration, m.iteration)?;
        put(gaussians, m.gaussians.len())?;
        put(dynamic, m.dynamic_count())
    })
}

/// Renders frame `frame`'s sharp image into `rgb` (row-major interleaved
/// RGB in [0, 1], `len` must equal `3 * width * height`).
///
/// # Safety
/// Handles are live; `rgb` is valid for writing `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn kgs_model_render(
    model: *const KgsModel,
    data: *const KgsDataset,
    frame: usize,
    rgb: *mut f64,
    len: usize,
) -> KgsStatus {
    guard(|| {
        let m = &borrow(model, "model")?.inner;
        let d = &borrow(data, "data")?.inner;
        if frame >= d.cameras.len() {
            return Err(Fail(KgsStatus::Config, format!("frame {frame} out of range")));
        }
        if rgb.is_null() {
            return Err(invalid("rgb is null"));
        }
        let img = m.render_sharp(&d.cameras[frame].camera()?, d.spec.timestamp(frame))?;
        if len != img.data.len() {
            return Err(Fail(
                KgsStatus::Config,
                format!("buffer holds {len} values, frame needs {}", img.data.len()),
            ));
        }
        ptr::copy_nonoverlapping(img.data.as_ptr(), rgb, len);
        Ok(())
    })
}

/// Mean PSNR (dB) and SSIM over the held-out frames.
///
/// # Safety
/// Handles are live; the outputs are valid for writing.
#[no_mangle]
pub unsafe extern "C" fn kgs_model_evaluate(
    model: *const KgsModel,
    data: *const KgsDataset,
    psnr: *mut f64,
    ssim: *mut f64,
) -> KgsStatus {
    guard(|| {
        let m = &borrow(model, "model")?.inner;
        let d = &borrow(data, "data")?.inner;
        let (p, s) = FrameMetrics::mean(&m.evaluate(d)?);
        put(psnr, p)?;
        put(ssim, s)
    })
}

/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kgs_model_free(model: *mut KgsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
