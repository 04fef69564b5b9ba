//! C interface to `ttcluster`.
//!
//! Every fallible function returns a [`TtcStatus`]. On failure the message
//! is kept per thread and can be read with [`ttc_last_error_message`].
//! Objects handed out as pointers are owned by the caller and must be
//! released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttcluster::bench::{preset, run_single, RunConfig, RunResult};
use ttcluster::potential::{lj_energy_and_gradient, LjParams};
use ttcluster::tt::LogProb;
use ttcluster::{Configuration, Error, TtTensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtcStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad index, shape mismatch or other argument out of range.
    Domain = 2,
    Config = 3,
    /// The probability model has no usable mass or produced non-finite values.
    Numerical = 4,
    /// Coincident particles or degenerate geometry.
    Geometry = 5,
    Evaluator = 6,
    Parse = 7,
    Io = 8,
    /// The output buffer is too small; the required size was reported.
    BufferTooSmall = 9,
    /// A Rust panic was caught at the boundary.
    Panic = 10,
}

/// Opaque tensor-train handle.
pub struct TtcTensor {
    inner: TtTensor,
}

/// Opaque record of one optimization run.
pub struct TtcRunResult {
    inner: RunResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> TtcStatus {
    match err.root() {
        Error::Domain(_) | Error::Size { .. } | Error::ZeroProbability { .. } => TtcStatus::Domain,
        Error::Degenerate(_) | Error::NonFiniteGradient { .. } | Error::Stagnation(_) => {
            TtcStatus::Numerical
        }
        Error::Singularity(..) | Error::Geometry(_) => TtcStatus::Geometry,
        Error::Evaluator(_) => TtcStatus::Evaluator,
        Error::Config(_) => TtcStatus::Config,
        Error::Parse(_) => TtcStatus::Parse,
        Error::Io(_) => TtcStatus::Io,
        Error::Context { .. } => unreachable!("root strips context"),
    }
}

/// Failure carried out of a guarded body.
struct Fail(TtcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TtcStatus::NullPointer, format!("{what} is null"))
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> TtcStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => TtcStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            TtcStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn write_out<T>(p: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(value);
    Ok(())
}

unsafe fn tensor_ref<'a>(t: *const TtcTensor) -> Result<&'a TtTensor, Fail> {
    t.as_ref().map(|t| &t.inner).ok_or_else(|| null("tensor"))
}

unsafe fn run_ref<'a>(r: *const TtcRunResult) -> Result<&'a RunResult, Fail> {
    r.as_ref().map(|r| &r.inner).ok_or_else(|| null("run result"))
}

unsafe fn str_in<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(TtcStatus::Parse, format!("{what} is not valid UTF-8")))
}

fn configuration(coords: &[f64]) -> Result<Configuration, Fail> {
    let pts = coords.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(Configuration::new(pts)?)
}

/// Copies `text` plus a terminating nul into `buf` when it fits. The
/// required size, nul included, goes to `needed`.
unsafe fn copy_string(text: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), Fail> {
    let required = text.len() + 1;
    if !needed.is_null() {
        needed.write(required);
    }
    if len < required {
        return Err(Fail(
            TtcStatus::BufferTooSmall,
            format!("buffer holds {len} bytes, {required} needed"),
        ));
    }
    let out = slice_out(buf.cast::<u8>(), required, "buffer")?;
    out[..text.len()].copy_from_slice(text.as_bytes());
    out[text.len()] = 0;
    Ok(())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn ttc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null if there was
/// none. Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ttc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Random tensor with entries uniform in `[0, 1)` and interior ranks
/// `min(rank, caps)`.
///
/// # Safety
/// `mode_sizes` must point to `ndim` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ttc_tensor_random(
    ndim: usize,
    mode_sizes: *const usize,
    rank: usize,
    seed: u64,
    out: *mut *mut TtcTensor,
) -> TtcStatus {
    guard(|| {
        let shape = slice_in(mode_sizes, ndim, "mode_sizes")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = TtTensor::random(shape, rank, &mut rng)?;
        write_out(out, Box::into_raw(Box::new(TtcTensor { inner: t })), "out")
    })
}

/// Rank-one tensor equal to one at `index` and zero elsewhere.
///
/// # Safety
/// `mode_sizes` and `index` must point to `ndim` values; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ttc_tensor_indicator(
    ndim: usize,
    mode_sizes: *const usize,
    index: *const usize,
    out: *mut *mut TtcTensor,
) -> TtcStatus {
    guard(|| {
        let shape = slice_in(mode_sizes, ndim, "mode_sizes")?;
        let index = slice_in(index, ndim, "index")?;
        let t = TtTensor::rank1_indicator(index, shape)?;
        write_out(out, Box::into_raw(Box::new(TtcTensor { inner: t })), "out")
    })
}

/// Parses the structured-text form written by [`ttc_tensor_to_text`].
///
/// # Safety
/// `text` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ttc_tensor_from_text(text: *const c_char, out: *mut *mut TtcTensor) -> TtcStatus {
    guard(|| {
        let t = TtTensor::from_text(str_in(text, "text")?)?;
        write_out(out, Box::into_raw(Box::new(TtcTensor { inner: t })), "out")
    })
}

/// Writes the structured-text form into `buf`.
///
/// # Safety
/// `buf` must hold `len` bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn ttc_tensor_to_text(
    t: *const TtcTensor,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> TtcStatus {
    guard(|| copy_string(&tensor_ref(t)?.to_text(), buf, len, needed))
}

/// # Safety
/// `t` must come from this library and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn ttc_tensor_free(t: *mut TtcTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// # Safety
/// `t` must be a live tensor handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ttc_tensor_ndim(t: *const TtcTensor, out: *mut usize) -> TtcStatus {
    guard(|| write_out(out, tensor_ref(t)?.ndim(), "out"))
}

/// Copies the mode sizes into `out`, which must hold `ndim` values.
///
/// # Safety
/// `t` must be a live tensor handle; `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ttc_tensor_mode_sizes(t: *const TtcTensor, out: *mut usize, len: usize) -> TtcStatus {
    guard(|| {
        let shape = tensor_ref(t)?.mode_sizes();
        if len < shape.len() {
            return Err(Fail(
                TtcStatus::BufferTooSmall,
                format!("need {} values, got {len}", shape.len()),
            ));
        }
        slice_out(out, shape.len(), "out")?.copy_from_slice(&shape);
        Ok(())
    })
}

/// Tensor element at `index`.
///
/// # Safety
/// `index` must point to `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ttc_tensor_evaluate(
    t: *const TtcTensor,
    index: *const usize,
    len: usize,
    out: *mut f64,
) -> TtcStatus {
    guard(|| {
        let v = tensor_ref(t)?.evaluate(slice_in(index, len, "index")?)?;
        write_out(out, v, "out")
    })
}

/// Natural log of `p(index)` under `p ∝ t²`; `-inf` where `p` is zero.
///
/// # Safety
/// `index` must point to `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ttc_tensor_log_prob(
    t: *const TtcTensor,
    index: *const usize,
    len: usize,
    out: *mut f64,
) -> TtcStatus {
    guard(|| {
        let v = match tensor_ref(t)?.log_prob(slice_in(index, len, "index")?)? {
            LogProb::Finite(l) => l,
            LogProb::Zero => f64::NEG_INFINITY,
        };
        write_out(out, v, "out")
    })
}

/// Draws `count` samples from `p ∝ t²`. Sample `s` occupies
/// `out[s * ndim .. (s + 1) * ndim]`.
///
/// # Safety
/// `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ttc_tensor_sample(
    t: *const TtcTensor,
    count: usize,
    seed: u64,
    out: *mut usize,
    len: usize,
) -> TtcStatus {
    guard(|| {
        let t = tensor_ref(t)?;
        let need = count * t.ndim();
        if len < need {
            return Err(Fail(TtcStatus::BufferTooSmall, format!("need {need} values, got {len}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = t.sample(count, &mut rng)?;
        let out = slice_out(out, need, "out")?;
        for (dst, s) in out.chunks_exact_mut(t.ndim().max(1)).zip(&samples) {
            dst.copy_from_slice(s);
        }
        Ok(())
    })
}

/// Lennard-Jones energy of `n_atoms` particles with coordinates laid out
/// as `x0 y0 z0 x1 ...`.
///
/// # Safety
/// `coords` must hold `3 * n_atoms` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ttc_lj_energy(
    n_atoms: usize,
    coords: *const f64,
    epsilon: f64,
    sigma: f64,
    out: *mut f64,
) -> TtcStatus {
    guard(|| {
        let c = configuration(slice_in(coords, 3 * n_atoms, "coords")?)?;
        let (e, _) = lj_energy_and_gradient(&c, &LjParams::new(epsilon, sigma)?)?;
        write_out(out, e, "out")
    })
}

/// Energy gradient, same layout as `coords`. `energy` may be null.
///
/// # Safety
/// `coords` and `grad` must hold `3 * n_atoms` values.
#[no_mangle]
pub unsafe extern "C" fn ttc_lj_gradient(
    n_atoms: usize,
    coords: *const f64,
    epsilon: f64,
    sigma: f64,
    grad: *mut f64,
    energy: *mut f64,
) -> TtcStatus {
    guard(|| {
        let c = configuration(slice_in(coords, 3 * n_atoms, "coords")?)?;
        let (e, g) = lj_energy_and_gradient(&c, &LjParams::new(epsilon, sigma)?)?;
        let out = slice_out(grad, 3 * n_atoms, "grad")?;
        for (dst, gi) in out.chunks_exact_mut(3).zip(&g) {
            dst.copy_from_slice(gi);
        }
        if !energy.is_null() {
            energy.write(e);
        }
        Ok(())
    })
}

/// Writes the TOML run configuration of a named preset.
///
/// # Safety
/// `name` must be nul-terminated; `buf` must hold `len` bytes; `needed`
/// may be null.
#[no_mangle]
pub unsafe extern "C" fn ttc_preset_config(
    name: *const c_char,
    atoms: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> TtcStatus {
    guard(|| {
        let cfg = preset(str_in(name, "name")?, atoms)?;
        copy_string(&cfg.to_toml(), buf, len, needed)
    })
}

/// Runs one global search plus refinement described by a TOML run
/// configuration.
///
/// # Safety
/// `config_toml` must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ttc_run_optimize(config_toml: *const c_char, out: *mut *mut TtcRunResult) -> TtcStatus {
    guard(|| {
        let cfg = RunConfig::from_toml(str_in(config_toml, "config_toml")?)?;
        let r = run_single(&cfg)?;
        write_out(out, Box::into_raw(Box::new(TtcRunResult { inner: r })), "out")
    })
}

/// # Safety
/// `r` must come from this library and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn ttc_run_result_free(r: *mut TtcRunResult) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Refined energy of the run.
///
/// # Safety
/// `r` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ttc_run_result_energy(r: *const TtcRunResult, out: *mut f64) -> TtcStatus {
    guard(|| write_out(out, run_ref(r)?.best_energy, "out"))
}

/// Relative error against the reference energy; NaN without one.
///
/// # Safety
/// `r` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ttc_run_result_relative_error(r: *const TtcRunResult, out: *mut f64) -> TtcStatus {
    guard(|| write_out(out, run_ref(r)?.relative_error, "out"))
}

/// Global-search evaluations, total and last refinement model calls.
/// Any output pointer may be null.
///
/// # Safety
/// `r` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ttc_run_result_calls(
    r: *const TtcRunResult,
    pc: *mut u64,
    lct: *mut u64,
    lcl: *mut u64,
) -> TtcStatus {
    guard(|| {
        let r = run_ref(r)?;
        for (p, v) in [(pc, r.pc as u64), (lct, r.lct), (lcl, r.lcl)] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// # Safety
/// `r` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ttc_run_result_atom_count(r: *const TtcRunResult, out: *mut usize) -> TtcStatus {
    guard(|| write_out(out, run_ref(r)?.final_structure.len(), "out"))
}

/// Final coordinates as `x0 y0 z0 x1 ...`; `out` must hold three values
/// per atom.
///
/// # Safety
/// `r` must be a live handle; `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn ttc_run_result_positions(r: *const TtcRunResult, out: *mut f64, len: usize) -> TtcStatus {
    guard(|| {
        let pos = run_ref(r)?.final_structure.positions();
        let need = 3 * pos.len();
        if len < need {
            return Err(Fail(TtcStatus::BufferTooSmall, format!("need {need} values, got {len}")));
        }
        for (dst, p) in slice_out(out, need, "out")?.chunks_exact_mut(3).zip(pos) {
            dst.copy_from_slice(p);
        }
        Ok(())
    })
}

/// The full run record as JSON.
///
/// # Safety
/// `r` must be a live handle; `buf` must hold `len` bytes; `needed` may be
/// null.
#[no_mangle]
pub unsafe extern "C" fn ttc_run_result_json(
    r: *const TtcRunResult,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> TtcStatus {
    guard(|| {
        let json = serde_json::to_string(run_ref(r)?).map_err(|e| Fail(TtcStatus::Parse, e.to_string()))?;
        copy_string(&json, buf, len, needed)
    })
}
