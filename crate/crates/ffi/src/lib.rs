//! C ABI for loading a checkpoint and running the encoder and decoder.
//!
//! Every call returns a [`SavaeStatus`]. On failure the message is kept per
//! thread and can be read with [`savae_last_error`]. Output buffers are
//! owned by the caller; query sizes first with [`savae_latent_frames`] and
//! [`savae_latent_dim`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use savae::dsp::AudioClip;
use savae::model::Model;
use savae::tensor::ParamStore;
use savae::train::{load_generator, WeightSet};
use savae::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SavaeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidParam = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Data = 6,
    NonFinite = 7,
    Autodiff = 8,
    Config = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

impl From<&Error> for SavaeStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape { .. } => SavaeStatus::Shape,
            Error::InvalidParam(_) => SavaeStatus::InvalidParam,
            Error::Autodiff(_) => SavaeStatus::Autodiff,
            Error::NonFinite(_) => SavaeStatus::NonFinite,
            Error::Io { .. } => SavaeStatus::Io,
            Error::Format { .. } | Error::Wav { .. } => SavaeStatus::Format,
            Error::Data(_) => SavaeStatus::Data,
            Error::Config(_) => SavaeStatus::Config,
        }
    }
}

/// Opaque model handle. Create with [`savae_model_load`], release with
/// [`savae_model_free`]. A handle may be shared across threads for reading.
pub struct SavaeModel {
    model: Model,
    params: ParamStore<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: SavaeStatus, msg: impl Into<String>) -> SavaeStatus {
    set_error(msg.into());
    status
}

/// Run `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), SavaeStatus>) -> SavaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SavaeStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(SavaeStatus::Panic, msg)
        }
    }
}

fn lift<T>(r: savae::Result<T>) -> Result<T, SavaeStatus> {
    r.map_err(|e| fail(SavaeStatus::from(&e), e.to_string()))
}

fn model_ref<'a>(m: *const SavaeModel) -> Result<&'a SavaeModel, SavaeStatus> {
    // SAFETY: non-null handles come from savae_model_load and stay valid until freed
    unsafe { m.as_ref() }.ok_or_else(|| fail(SavaeStatus::NullPointer, "model handle is null"))
}

fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], SavaeStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(SavaeStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: caller promises `n` readable values at `p`
    Ok(unsafe { std::slice::from_raw_parts(p, n) })
}

fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], SavaeStatus> {
    if p.is_null() {
        return Err(fail(SavaeStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: caller promises `n` writable values at `p`
    Ok(unsafe { std::slice::from_raw_parts_mut(p, n) })
}

fn out<T>(p: *mut T, v: T, what: &str) -> Result<(), SavaeStatus> {
    if p.is_null() {
        return Err(fail(SavaeStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: checked non-null; caller owns the slot
    unsafe { p.write(v) };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn savae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn savae_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Load generator weights from a checkpoint. `ema` nonzero selects the EMA
/// weights.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn savae_model_load(path: *const c_char, ema: i32, out_model: *mut *mut SavaeModel) -> SavaeStatus {
    guard(|| {
        if path.is_null() {
            return Err(fail(SavaeStatus::NullPointer, "path is null"));
        }
        // SAFETY: caller passes a NUL-terminated string
        let p = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| fail(SavaeStatus::InvalidParam, "path is not UTF-8"))?;
        if out_model.is_null() {
            return Err(fail(SavaeStatus::NullPointer, "out_model is null"));
        }
        let which = if ema != 0 { WeightSet::Ema } else { WeightSet::Raw };
        let (model, params) = lift(load_generator(Path::new(p), which))?;
        out(out_model, Box::into_raw(Box::new(SavaeModel { model, params })), "out_model")
    })
}

/// Release a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from [`savae_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn savae_model_free(model: *mut SavaeModel) {
    if !model.is_null() {
        // SAFETY: handle was produced by Box::into_raw in savae_model_load
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Latent dimension `D`.
///
/// # Safety
/// `model` must be a live handle; `out_dim` writable.
#[no_mangle]
pub unsafe extern "C" fn savae_latent_dim(model: *const SavaeModel, out_dim: *mut usize) -> SavaeStatus {
    guard(|| out(out_dim, model_ref(model)?.model.cfg.latent_dim, "out_dim"))
}

/// Sample rate the model expects.
///
/// # Safety
/// `model` must be a live handle; `out_rate` writable.
#[no_mangle]
pub unsafe extern "C" fn savae_sample_rate(model: *const SavaeModel, out_rate: *mut u32) -> SavaeStatus {
    guard(|| out(out_rate, model_ref(model)?.model.cfg.sample_rate, "out_rate"))
}

/// Number of latent frames `M` produced for `n_samples` of audio.
///
/// # Safety
/// `model` must be a live handle; `out_frames` writable.
#[no_mangle]
pub unsafe extern "C" fn savae_latent_frames(model: *const SavaeModel, n_samples: usize, out_frames: *mut usize) -> SavaeStatus {
    guard(|| out(out_frames, model_ref(model)?.model.cfg.latent_frames(n_samples), "out_frames"))
}

/// Encode mono audio to the posterior mean, written `D×M` row-major into
/// `mu` (capacity `mu_cap` floats). `out_frames` receives `M`.
///
/// # Safety
/// `samples` must hold `n_samples` floats and `mu` `mu_cap` floats.
#[no_mangle]
pub unsafe extern "C" fn savae_encode(
    model: *const SavaeModel,
    samples: *const f32,
    n_samples: usize,
    mu: *mut f32,
    mu_cap: usize,
    out_frames: *mut usize,
) -> SavaeStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = slice(samples, n_samples, "samples")?;
        let clip = lift(AudioClip::new(x.to_vec(), m.model.cfg.sample_rate))?;
        let code = lift(m.model.encode_mean(&m.params, &clip))?;
        if code.mu.len() > mu_cap {
            return Err(fail(
                SavaeStatus::BufferTooSmall,
                format!("need {} floats for mu, have {mu_cap}", code.mu.len()),
            ));
        }
        slice_mut(mu, code.mu.len(), "mu")?.copy_from_slice(&code.mu);
        out(out_frames, code.frames, "out_frames")
    })
}

/// Decode a `D×M` row-major latent to `n_out` samples. `n_out` may not
/// exceed `8·M·hop`.
///
/// # Safety
/// `z` must hold `D·frames` floats and `audio` `n_out` floats.
#[no_mangle]
pub unsafe extern "C" fn savae_decode(
    model: *const SavaeModel,
    z: *const f32,
    frames: usize,
    audio: *mut f32,
    n_out: usize,
) -> SavaeStatus {
    guard(|| {
        let m = model_ref(model)?;
        let z = slice(z, m.model.cfg.latent_dim * frames, "z")?;
        let clip = lift(m.model.decode_latent(&m.params, z, frames, Some(n_out)))?;
        slice_mut(audio, n_out, "audio")?.copy_from_slice(&clip.samples);
        Ok(())
    })
}
