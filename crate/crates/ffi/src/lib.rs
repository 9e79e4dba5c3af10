//! C ABI over `axsr_core`.
//!
//! Objects cross the boundary as opaque handles created by `*_load` /
//! `*_new` and released by the matching `*_free`. Every fallible call
//! returns an [`AxsrStatus`]; on failure the message is available from
//! [`axsr_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use axsr_core::checkpoint::load_generator;
use axsr_core::evalkit;
use axsr_core::flownet::{Generator, InterpMode};
use axsr_core::shapelab::{self, SurfacePointCloud, L_MAX};
use axsr_core::volio::{self, BitDepth, VolumeStack};
use axsr_core::zaugment::{self, InferenceOptions, Schedule};
use axsr_core::Error;
use ndarray::Array3;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxsrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Tiff = 4,
    ShapeMismatch = 5,
    ModeMismatch = 6,
    Checkpoint = 7,
    Numerical = 8,
    Config = 9,
    NonFiniteLoss = 10,
    Panic = 11,
    Internal = 12,
}

/// Interpolation mode of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxsrMode {
    /// Midpoint only.
    Fixed = 0,
    /// Any relative position in (0, 1).
    Plus = 1,
}

/// Per-slice averages over the generated slices of a stack.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AxsrMetrics {
    pub rmse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub slices_scored: usize,
}

/// A trained slice-interpolation network.
pub struct AxsrModel {
    generator: Generator,
}

/// A z-stack of grayscale slices.
pub struct AxsrStack {
    stack: VolumeStack,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> AxsrStatus {
    match e {
        Error::Io { .. } => AxsrStatus::Io,
        Error::Tiff { .. } | Error::BadPage { .. } => AxsrStatus::Tiff,
        Error::InvalidArgument(_) => AxsrStatus::InvalidArgument,
        Error::ShapeMismatch(_) => AxsrStatus::ShapeMismatch,
        Error::ModeMismatch(_) => AxsrStatus::ModeMismatch,
        Error::Checkpoint(_) => AxsrStatus::Checkpoint,
        Error::Numerical(_) => AxsrStatus::Numerical,
        Error::Config(_) | Error::Json(_) => AxsrStatus::Config,
        Error::NonFiniteLoss { .. } => AxsrStatus::NonFiniteLoss,
    }
}

struct Failure(AxsrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(AxsrStatus::NullArgument, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AxsrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AxsrStatus::Ok,
        Ok(Err(Failure(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            AxsrStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(AxsrStatus::InvalidArgument, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn put<T>(out: *mut *mut T, v: T) {
    *out = Box::into_raw(Box::new(v));
}

/// Message of the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn axsr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn axsr_status_name(status: AxsrStatus) -> *const c_char {
    let s: &'static CStr = match status {
        AxsrStatus::Ok => c"ok",
        AxsrStatus::NullArgument => c"null_argument",
        AxsrStatus::InvalidArgument => c"invalid_argument",
        AxsrStatus::Io => c"io",
        AxsrStatus::Tiff => c"tiff",
        AxsrStatus::ShapeMismatch => c"shape_mismatch",
        AxsrStatus::ModeMismatch => c"mode_mismatch",
        AxsrStatus::Checkpoint => c"checkpoint",
        AxsrStatus::Numerical => c"numerical",
        AxsrStatus::Config => c"config",
        AxsrStatus::NonFiniteLoss => c"non_finite_loss",
        AxsrStatus::Panic => c"panic",
        AxsrStatus::Internal => c"internal",
    };
    s.as_ptr()
}

/// Toolkit version, NUL-terminated and static.
#[no_mangle]
pub extern "C" fn axsr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `20·log10(255 / rmse)`; infinite for zero RMSE.
#[no_mangle]
pub extern "C" fn axsr_psnr_from_rmse(rmse: f64) -> f64 {
    evalkit::psnr_from_rmse(rmse)
}

/// Loads a checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn axsr_model_load(path: *const c_char, out: *mut *mut AxsrModel) -> AxsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let ck = load_generator(path, None)?;
        put(out, AxsrModel { generator: ck.generator });
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`axsr_model_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn axsr_model_free(model: *mut AxsrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn axsr_model_mode(model: *const AxsrModel, out: *mut AxsrMode) -> AxsrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = match m.generator.mode() {
            InterpMode::Fixed => AxsrMode::Fixed,
            InterpMode::Plus => AxsrMode::Plus,
        };
        Ok(())
    })
}

/// Number of student parameters (the deployed network).
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn axsr_model_param_count(model: *const AxsrModel, out: *mut usize) -> AxsrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.generator.student_param_count();
        Ok(())
    })
}

/// Reads a multi-page 8- or 16-bit TIFF.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn axsr_stack_load(path: *const c_char, out: *mut *mut AxsrStack) -> AxsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let stack = volio::load_stack(path_arg(path, "path")?)?;
        put(out, AxsrStack { stack });
        Ok(())
    })
}

/// Builds a stack from `depth·height·width` intensities in z, y, x order.
/// `bits` is 8 or 16.
///
/// # Safety
/// `data` must point to `depth·height·width` doubles and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn axsr_stack_new(
    depth: usize,
    height: usize,
    width: usize,
    bits: u8,
    data: *const f64,
    out: *mut *mut AxsrStack,
) -> AxsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let bit_depth = match bits {
            8 => BitDepth::Eight,
            16 => BitDepth::Sixteen,
            b => return Err(Failure(AxsrStatus::InvalidArgument, format!("bit depth {b} not in {{8, 16}}"))),
        };
        let n = depth
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Failure(AxsrStatus::InvalidArgument, "stack size overflows".into()))?;
        let vals = slice_arg(data, n, "data")?;
        let vox = Array3::from_shape_vec((depth, height, width), vals.to_vec())
            .map_err(|e| Failure(AxsrStatus::ShapeMismatch, e.to_string()))?;
        put(out, AxsrStack { stack: VolumeStack::new(vox, bit_depth)? });
        Ok(())
    })
}

/// # Safety
/// `stack` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn axsr_stack_free(stack: *mut AxsrStack) {
    if !stack.is_null() {
        drop(Box::from_raw(stack));
    }
}

/// # Safety
/// `stack` must be live; the output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn axsr_stack_dims(
    stack: *const AxsrStack,
    depth: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> AxsrStatus {
    guard(|| {
        let s = &stack.as_ref().ok_or_else(|| null("stack"))?.stack;
        *depth.as_mut().ok_or_else(|| null("depth"))? = s.depth();
        *height.as_mut().ok_or_else(|| null("height"))? = s.height();
        *width.as_mut().ok_or_else(|| null("width"))? = s.width();
        Ok(())
    })
}

/// Copies the intensities (z, y, x order) into `buf`, which must hold
/// exactly `depth·height·width` values.
///
/// # Safety
/// `stack` must be live and `buf` point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn axsr_stack_read(stack: *const AxsrStack, buf: *mut f64, len: usize) -> AxsrStatus {
    guard(|| {
        let s = &stack.as_ref().ok_or_else(|| null("stack"))?.stack;
        let v = s.voxels();
        if len != v.len() {
            return Err(Failure(
                AxsrStatus::ShapeMismatch,
                format!("buffer holds {len} values, stack has {}", v.len()),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        let dst = std::slice::from_raw_parts_mut(buf, len);
        for (d, s) in dst.iter_mut().zip(v.iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// # Safety
/// `stack` must be live and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn axsr_stack_save(stack: *const AxsrStack, path: *const c_char) -> AxsrStatus {
    guard(|| {
        let s = &stack.as_ref().ok_or_else(|| null("stack"))?.stack;
        volio::save_stack(s, path_arg(path, "path")?)?;
        Ok(())
    })
}

unsafe fn augment(
    model: *const AxsrModel,
    stack: *const AxsrStack,
    schedule: Schedule,
    out: *mut *mut AxsrStack,
) -> Result<(), Failure> {
    let m = model.as_ref().ok_or_else(|| null("model"))?;
    let s = stack.as_ref().ok_or_else(|| null("stack"))?;
    if out.is_null() {
        return Err(null("out"));
    }
    let r = zaugment::augment_volume(&m.generator, &s.stack, &schedule, &InferenceOptions::default())?;
    put(out, AxsrStack { stack: r });
    Ok(())
}

/// `passes` midpoint doublings: `n` slices become `2^passes·(n − 1) + 1`.
///
/// # Safety
/// Handles must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn axsr_double_stack(
    model: *const AxsrModel,
    stack: *const AxsrStack,
    passes: usize,
    out: *mut *mut AxsrStack,
) -> AxsrStatus {
    guard(|| augment(model, stack, Schedule::Passes(passes), out))
}

/// Inserts one slice per entry of `zs` (ascending, inside (0, 1)) into
/// every gap. Needs a plus-mode model.
///
/// # Safety
/// Handles must be live, `zs` point to `n` doubles and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn axsr_upsample_continuous(
    model: *const AxsrModel,
    stack: *const AxsrStack,
    zs: *const f64,
    n: usize,
    out: *mut *mut AxsrStack,
) -> AxsrStatus {
    guard(|| {
        let zs = slice_arg(zs, n, "zs")?.to_vec();
        augment(model, stack, Schedule::Positions(zs), out)
    })
}

/// Scores the `stride` generated slices of every gap of `pred` against
/// `truth`.
///
/// # Safety
/// Handles must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn axsr_interstack_metrics(
    pred: *const AxsrStack,
    truth: *const AxsrStack,
    stride: usize,
    out: *mut AxsrMetrics,
) -> AxsrStatus {
    guard(|| {
        let p = &pred.as_ref().ok_or_else(|| null("pred"))?.stack;
        let t = &truth.as_ref().ok_or_else(|| null("truth"))?.stack;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let r = evalkit::interstack_report(p, t, stride)?;
        *out = AxsrMetrics {
            rmse: r.metrics.rmse,
            psnr_db: r.metrics.psnr_db,
            ssim: r.metrics.ssim,
            slices_scored: r.slices_scored,
        };
        Ok(())
    })
}

/// Degree-5 spherical-harmonic fit of `n` surface points (`xyz` holds
/// `3n` coordinates). Writes `P_0..P_5` to `power` (6 values) and the
/// roughness to `roughness`.
///
/// # Safety
/// `xyz` must point to `3n` doubles, `power` to 6 writable doubles and
/// `roughness` be valid.
#[no_mangle]
pub unsafe extern "C" fn axsr_roughness(
    xyz: *const f64,
    n: usize,
    power: *mut f64,
    roughness: *mut f64,
) -> AxsrStatus {
    guard(|| {
        let coords = slice_arg(xyz, n.saturating_mul(3), "xyz")?;
        if power.is_null() {
            return Err(null("power"));
        }
        let ro = roughness.as_mut().ok_or_else(|| null("roughness"))?;
        let points = coords.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let e = shapelab::fit_sh(&SurfacePointCloud::new(points, 1)?, L_MAX)?;
        let p = shapelab::power_spectrum(&e)?;
        std::slice::from_raw_parts_mut(power, L_MAX + 1).copy_from_slice(&p);
        *ro = shapelab::roughness(&e)?;
        Ok(())
    })
}
