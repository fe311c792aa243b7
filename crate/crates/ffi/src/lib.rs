//! C interface to trained models. A model is loaded from a checkpoint into
//! an opaque handle; every call returns an [`RvaeStatus`] and writes results
//! through caller-owned buffers. After a failure, [`rvae_last_error`] gives
//! the message for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rvae::brownian::{heat_kernel_logpdf, sample_prior_paths};
use rvae::geometry::{geodesic_distance, log_volume_measure, pullback_metric, GeodesicOptions};
use rvae::harness::load_model;
use rvae::model::{Mode, RvaeModel};
use rvae::RvaeError;

/// Opaque model handle.
pub struct RvaeHandle {
    model: RvaeModel,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RvaeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Numerical = 4,
    Format = 5,
    Io = 6,
    Config = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RvaeMode {
    Riemannian = 0,
    EuclideanBaseline = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let text = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn status_of(e: &RvaeError) -> RvaeStatus {
    match e {
        RvaeError::DimensionMismatch { .. } => RvaeStatus::DimensionMismatch,
        RvaeError::Contract(_) => RvaeStatus::InvalidArgument,
        RvaeError::Numerical(_) => RvaeStatus::Numerical,
        RvaeError::Format(_) => RvaeStatus::Format,
        RvaeError::Config(_) => RvaeStatus::Config,
        RvaeError::Io(_) => RvaeStatus::Io,
    }
}

/// Runs `body`, turning errors and panics into a status and a message.
fn guard(body: impl FnOnce() -> Result<(), (RvaeStatus, String)>) -> RvaeStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => RvaeStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RvaeStatus::Panic
        }
    }
}

fn lift(e: RvaeError) -> (RvaeStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (RvaeStatus, String) {
    (RvaeStatus::NullPointer, format!("{what} is null"))
}

unsafe fn handle<'a>(h: *const RvaeHandle) -> Result<&'a RvaeModel, (RvaeStatus, String)> {
    h.as_ref().map(|h| &h.model).ok_or_else(|| null("model handle"))
}

unsafe fn input<'a>(p: *const f64, len: usize, want: usize, what: &str) -> Result<&'a [f64], (RvaeStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    if len != want {
        return Err((RvaeStatus::DimensionMismatch, format!("{what}: expected length {want}, got {len}")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, want: usize, what: &str) -> Result<&'a mut [f64], (RvaeStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    if len != want {
        return Err((RvaeStatus::DimensionMismatch, format!("{what}: expected length {want}, got {len}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn write<T>(p: *mut T, v: T, what: &str) -> Result<(), (RvaeStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    *p = v;
    Ok(())
}

/// Message of the last failed call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rvae_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rvae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint. On success `*out` owns a handle to release with
/// [`rvae_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rvae_model_load(path: *const c_char, out: *mut *mut RvaeHandle) -> RvaeStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("output handle"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (RvaeStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let (model, _) = load_model(Path::new(path)).map_err(lift)?;
        *out = Box::into_raw(Box::new(RvaeHandle { model }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `h` must come from [`rvae_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rvae_model_free(h: *mut RvaeHandle) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must be a live handle and the output pointers valid.
#[no_mangle]
pub unsafe extern "C" fn rvae_model_dims(
    h: *const RvaeHandle,
    data_dim: *mut usize,
    latent_dim: *mut usize,
    mode: *mut RvaeMode,
) -> RvaeStatus {
    guard(|| {
        let m = handle(h)?;
        write(data_dim, m.data_dim(), "data_dim")?;
        write(latent_dim, m.latent_dim(), "latent_dim")?;
        let code = match m.mode {
            Mode::Riemannian => RvaeMode::Riemannian,
            Mode::EuclideanBaseline => RvaeMode::EuclideanBaseline,
        };
        write(mode, code, "mode")
    })
}

/// Encoder mean of one input of length `data_dim`.
///
/// # Safety
/// Buffers must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn rvae_encode(
    h: *const RvaeHandle,
    x: *const f64,
    x_len: usize,
    code_out: *mut f64,
    code_len: usize,
) -> RvaeStatus {
    guard(|| {
        let m = handle(h)?;
        let x = input(x, x_len, m.data_dim(), "input")?;
        let out = output(code_out, code_len, m.latent_dim(), "code output")?;
        out.copy_from_slice(&m.encode_full(x).map_err(lift)?.mean);
        Ok(())
    })
}

/// Decoder mean at a latent point.
///
/// # Safety
/// Buffers must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn rvae_decode(
    h: *const RvaeHandle,
    z: *const f64,
    z_len: usize,
    x_out: *mut f64,
    x_len: usize,
) -> RvaeStatus {
    guard(|| {
        let m = handle(h)?;
        let z = input(z, z_len, m.latent_dim(), "latent point")?;
        let out = output(x_out, x_len, m.data_dim(), "decoded output")?;
        out.copy_from_slice(&m.decoder_mean.forward(z).map_err(lift)?);
        Ok(())
    })
}

/// Pull-back metric at `z`, row-major `d × d`, plus its log volume measure.
///
/// # Safety
/// Buffers must hold the stated lengths; `log_volume` may be null.
#[no_mangle]
pub unsafe extern "C" fn rvae_metric(
    h: *const RvaeHandle,
    z: *const f64,
    z_len: usize,
    metric_out: *mut f64,
    metric_len: usize,
    log_volume: *mut f64,
) -> RvaeStatus {
    guard(|| {
        let m = handle(h)?;
        let d = m.latent_dim();
        let z = input(z, z_len, d, "latent point")?;
        let out = output(metric_out, metric_len, d * d, "metric output")?;
        let imm = m.immersion().map_err(lift)?;
        let g = pullback_metric(&imm, z).map_err(lift)?;
        out.copy_from_slice(g.matrix().data());
        if !log_volume.is_null() {
            *log_volume = log_volume_measure(&g);
        }
        Ok(())
    })
}

/// Length of the fitted geodesic between `a` and `b`.
///
/// # Safety
/// Both points must hold `latent_dim` values.
#[no_mangle]
pub unsafe extern "C" fn rvae_geodesic_distance(
    h: *const RvaeHandle,
    a: *const f64,
    b: *const f64,
    len: usize,
    n_basis: usize,
    n_segments: usize,
    max_iters: usize,
    distance: *mut f64,
) -> RvaeStatus {
    guard(|| {
        let m = handle(h)?;
        let d = m.latent_dim();
        let a = input(a, len, d, "start point")?;
        let b = input(b, len, d, "end point")?;
        if n_segments < 2 {
            return Err((RvaeStatus::InvalidArgument, "n_segments must be at least 2".into()));
        }
        let opts = GeodesicOptions { n_basis, n_segments, max_iters, ..GeodesicOptions::default() };
        let imm = m.immersion().map_err(lift)?;
        write(distance, geodesic_distance(&imm, a, b, &opts).map_err(lift)?, "distance")
    })
}

/// Log prior density at `z`: the heat kernel with respect to the volume
/// measure for a Riemannian model, the standard normal coordinate density
/// for the baseline.
///
/// # Safety
/// `z` must hold `latent_dim` values.
#[no_mangle]
pub unsafe extern "C" fn rvae_prior_logpdf(h: *const RvaeHandle, z: *const f64, z_len: usize, out: *mut f64) -> RvaeStatus {
    guard(|| {
        let m = handle(h)?;
        let z = input(z, z_len, m.latent_dim(), "latent point")?;
        let value = match m.mode {
            Mode::Riemannian => {
                let imm = m.immersion().map_err(lift)?;
                heat_kernel_logpdf(&m.prior, z, &imm, &GeodesicOptions::default()).map_err(lift)?
            }
            Mode::EuclideanBaseline => {
                -0.5 * z.len() as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
            }
        };
        write(out, value, "output")
    })
}

/// `n_paths` prior walk endpoints, row-major `n_paths × d`, with the learned
/// diffusion time scaled by `t_scale`. Riemannian models only.
///
/// # Safety
/// `out` must hold `n_paths · latent_dim` values.
#[no_mangle]
pub unsafe extern "C" fn rvae_sample_prior(
    h: *const RvaeHandle,
    n_paths: usize,
    steps: usize,
    t_scale: f64,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> RvaeStatus {
    guard(|| {
        let m = handle(h)?;
        if m.mode != Mode::Riemannian {
            return Err((RvaeStatus::InvalidArgument, "prior walks need a riemannian model".into()));
        }
        let d = m.latent_dim();
        let buf = output(out, out_len, n_paths * d, "sample output")?;
        let prior = m.prior.scaled_time(t_scale).map_err(lift)?;
        let imm = m.immersion().map_err(lift)?;
        let paths = sample_prior_paths(&prior, &imm, steps, n_paths, seed).map_err(lift)?;
        for (row, p) in buf.chunks_mut(d.max(1)).zip(&paths) {
            row.copy_from_slice(p.endpoint());
        }
        Ok(())
    })
}
