//! C ABI for narrablend.
//!
//! Handles (`NbConfig`, `NbScript`, `NbRun`) are opaque and owned by the
//! caller once returned; release them with the matching `*_free` function.
//! Every fallible call returns an [`NbStatus`]; on failure a description is
//! available from [`nb_last_error_message`] on the same thread. Strings
//! returned through `char **` out-parameters are freed with
//! [`nb_string_free`]. Segment and step numbers are 1-based, boundary
//! indices 0-based.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use narrablend::bridge::bridge_engine;
use narrablend::rundir::write_run_dir;
use narrablend::{dipw, sar, twb, Engine, Error, RunConfig, StoryRun, StoryScript};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NbStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Validation = 4,
    Argument = 5,
    Config = 6,
    Io = 7,
    Transport = 8,
    Protocol = 9,
    Contract = 10,
    Segment = 11,
    OutOfRange = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

impl From<&Error> for NbStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Parse { .. } => NbStatus::Parse,
            Error::Validation(_) => NbStatus::Validation,
            Error::Argument(_) => NbStatus::Argument,
            Error::Config { .. } => NbStatus::Config,
            Error::Io { .. } => NbStatus::Io,
            Error::Transport(_) => NbStatus::Transport,
            Error::Protocol(_) => NbStatus::Protocol,
            Error::Contract(_) => NbStatus::Contract,
            Error::Segment { .. } => NbStatus::Segment,
        }
    }
}

/// Run configuration.
pub struct NbConfig {
    inner: RunConfig,
}

/// Parsed and validated story script.
pub struct NbScript {
    inner: StoryScript,
}

/// Completed story run.
pub struct NbRun {
    inner: StoryRun,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(NbStatus);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        set_last_error(e.to_string());
        Failure(NbStatus::from(&e))
    }
}

fn fail(status: NbStatus, msg: impl Into<String>) -> Failure {
    set_last_error(msg);
    Failure(status)
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NbStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NbStatus::Ok,
        Ok(Err(Failure(status))) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            NbStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(NbStatus::NullArgument, format!("`{name}` is null")))
}

unsafe fn deref_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(NbStatus::NullArgument, format!("`{name}` is null")))
}

unsafe fn out_param<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    deref_mut(p, name)
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(NbStatus::NullArgument, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| fail(NbStatus::InvalidUtf8, format!("`{name}` is not UTF-8: {e}")))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes replaced").into_raw()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message describing the most recent failure on this thread, or NULL. The
/// pointer stays valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn nb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Frees a string returned by this library. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn nb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---- configuration ----

#[no_mangle]
pub unsafe extern "C" fn nb_config_default(out: *mut *mut NbConfig) -> NbStatus {
    guard(|| {
        let out = out_param(out, "out")?;
        *out = Box::into_raw(Box::new(NbConfig {
            inner: RunConfig::default(),
        }));
        Ok(())
    })
}

/// Parses a JSON config document (missing keys take their defaults).
#[no_mangle]
pub unsafe extern "C" fn nb_config_from_json(json: *const c_char, out: *mut *mut NbConfig) -> NbStatus {
    guard(|| {
        let out = out_param(out, "out")?;
        let inner = RunConfig::from_json(c_str(json, "json")?)?;
        *out = Box::into_raw(Box::new(NbConfig { inner }));
        Ok(())
    })
}

/// Sets the seed of every seeded component.
#[no_mangle]
pub unsafe extern "C" fn nb_config_set_seed(config: *mut NbConfig, seed: u64) -> NbStatus {
    guard(|| {
        let c = deref_mut(config, "config")?;
        c.inner = c.inner.clone().with_seed(seed);
        Ok(())
    })
}

/// Sets the number of denoising (and weighting) steps.
#[no_mangle]
pub unsafe extern "C" fn nb_config_set_steps(config: *mut NbConfig, steps: usize) -> NbStatus {
    guard(|| {
        let c = deref_mut(config, "config")?;
        let next = c.inner.clone().with_steps(steps);
        next.validate()?;
        c.inner = next;
        Ok(())
    })
}

/// Switches the three mechanisms on (non-zero) or off (zero).
#[no_mangle]
pub unsafe extern "C" fn nb_config_set_mechanisms(config: *mut NbConfig, dipw: i32, twb: i32, sar: i32) -> NbStatus {
    guard(|| {
        let c = deref_mut(config, "config")?;
        c.inner.dipw.enabled = dipw != 0;
        c.inner.blend.enabled = twb != 0;
        c.inner.sar.enabled = sar != 0;
        Ok(())
    })
}

/// Effective configuration as pretty JSON; free with `nb_string_free`.
#[no_mangle]
pub unsafe extern "C" fn nb_config_to_json(config: *const NbConfig, out: *mut *mut c_char) -> NbStatus {
    guard(|| {
        let c = deref(config, "config")?;
        let out = out_param(out, "out")?;
        *out = into_c_string(c.inner.effective().to_json_pretty());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn nb_config_free(config: *mut NbConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

// ---- scripts ----

/// Parses and validates a script from `len` bytes of UTF-8 JSON.
#[no_mangle]
pub unsafe extern "C" fn nb_script_parse(data: *const u8, len: usize, out: *mut *mut NbScript) -> NbStatus {
    guard(|| {
        let out = out_param(out, "out")?;
        if data.is_null() {
            return Err(fail(NbStatus::NullArgument, "`data` is null"));
        }
        let bytes = std::slice::from_raw_parts(data, len);
        let inner = narrablend::parse_script(bytes)?;
        *out = Box::into_raw(Box::new(NbScript { inner }));
        Ok(())
    })
}

/// Number of segments, or 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn nb_script_len(script: *const NbScript) -> usize {
    script.as_ref().map_or(0, |s| s.inner.len())
}

#[no_mangle]
pub unsafe extern "C" fn nb_script_free(script: *mut NbScript) {
    if !script.is_null() {
        drop(Box::from_raw(script));
    }
}

// ---- generation ----

unsafe fn generate_with(
    engine: impl FnOnce(RunConfig) -> narrablend::Result<Engine>,
    config: *const NbConfig,
    script: *const NbScript,
    out: *mut *mut NbRun,
) -> Result<(), Failure> {
    let c = deref(config, "config")?;
    let s = deref(script, "script")?;
    let out = out_param(out, "out")?;
    let run = engine(c.inner.clone())?.generate_story(&s.inner)?;
    *out = Box::into_raw(Box::new(NbRun { inner: run }));
    Ok(())
}

/// Generates a story with the built-in toy backbone and mock embeddings.
#[no_mangle]
pub unsafe extern "C" fn nb_generate(
    config: *const NbConfig,
    script: *const NbScript,
    out: *mut *mut NbRun,
) -> NbStatus {
    guard(|| generate_with(Engine::toy, config, script, out))
}

/// Generates a story through a bridge server at `endpoint`
/// (`host:port`, `tcp://host:port` or `stdio:<command>`).
#[no_mangle]
pub unsafe extern "C" fn nb_generate_bridge(
    config: *const NbConfig,
    script: *const NbScript,
    endpoint: *const c_char,
    out: *mut *mut NbRun,
) -> NbStatus {
    guard(|| {
        let ep = c_str(endpoint, "endpoint")?;
        generate_with(|cfg| bridge_engine(cfg, ep), config, script, out)
    })
}

#[no_mangle]
pub unsafe extern "C" fn nb_run_free(run: *mut NbRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

#[no_mangle]
pub unsafe extern "C" fn nb_run_segment_count(run: *const NbRun) -> usize {
    run.as_ref().map_or(0, |r| r.inner.segments.len())
}

/// Number of weighting steps recorded for `segment`, or 0 if out of range.
#[no_mangle]
pub unsafe extern "C" fn nb_run_step_count(run: *const NbRun, segment: usize) -> usize {
    run.as_ref()
        .and_then(|r| segment.checked_sub(1).and_then(|i| r.inner.schedules.get(i)))
        .map_or(0, |s| s.records.len())
}

/// Prompt weights `(alpha_scene, alpha_action)` at `step` of `segment`.
#[no_mangle]
pub unsafe extern "C" fn nb_run_weights(
    run: *const NbRun,
    segment: usize,
    step: usize,
    alpha_scene: *mut f64,
    alpha_action: *mut f64,
) -> NbStatus {
    guard(|| {
        let r = deref(run, "run")?;
        let rec = segment
            .checked_sub(1)
            .and_then(|i| r.inner.schedules.get(i))
            .and_then(|s| step.checked_sub(1).and_then(|j| s.records.get(j)))
            .ok_or_else(|| fail(NbStatus::OutOfRange, format!("no record for segment {segment} step {step}")))?;
        *out_param(alpha_scene, "alpha_scene")? = rec.alpha_scene;
        *out_param(alpha_action, "alpha_action")? = rec.alpha_action;
        Ok(())
    })
}

/// Boundary discontinuity between segments `boundary + 1` and `boundary + 2`.
#[no_mangle]
pub unsafe extern "C" fn nb_run_boundary_discontinuity(run: *const NbRun, boundary: usize, out: *mut f64) -> NbStatus {
    guard(|| {
        let r = deref(run, "run")?;
        let v = *r
            .inner
            .metrics
            .boundary_discontinuity
            .get(boundary)
            .ok_or_else(|| fail(NbStatus::OutOfRange, format!("no boundary {boundary}")))?;
        *out_param(out, "out")? = v;
        Ok(())
    })
}

/// Copies the latents of `segment` (frames in order, each row-major) into
/// `buf`. `*needed` always receives the value count; if `capacity` is
/// smaller, nothing is copied and `BufferTooSmall` is returned.
#[no_mangle]
pub unsafe extern "C" fn nb_run_latents(
    run: *const NbRun,
    segment: usize,
    buf: *mut f64,
    capacity: usize,
    needed: *mut usize,
) -> NbStatus {
    guard(|| {
        let r = deref(run, "run")?;
        let seg = segment
            .checked_sub(1)
            .and_then(|i| r.inner.segments.get(i))
            .ok_or_else(|| fail(NbStatus::OutOfRange, format!("no segment {segment}")))?;
        let n = seg.frame_count() * seg.shape().len();
        *out_param(needed, "needed")? = n;
        if capacity < n {
            return Err(fail(NbStatus::BufferTooSmall, format!("{n} values needed, capacity {capacity}")));
        }
        if buf.is_null() {
            return Err(fail(NbStatus::NullArgument, "`buf` is null"));
        }
        let dst = std::slice::from_raw_parts_mut(buf, n);
        for (chunk, f) in dst.chunks_exact_mut(seg.shape().len()).zip(&seg.frames) {
            chunk.copy_from_slice(f.values());
        }
        Ok(())
    })
}

/// Run metrics as JSON; free with `nb_string_free`.
#[no_mangle]
pub unsafe extern "C" fn nb_run_metrics_json(run: *const NbRun, out: *mut *mut c_char) -> NbStatus {
    guard(|| {
        let r = deref(run, "run")?;
        let out = out_param(out, "out")?;
        let json = serde_json::to_string(&r.inner.metrics).expect("metrics serialize");
        *out = into_c_string(json);
        Ok(())
    })
}

/// Writes the full run directory (created if missing).
#[no_mangle]
pub unsafe extern "C" fn nb_run_write_dir(run: *const NbRun, path: *const c_char) -> NbStatus {
    guard(|| {
        let r = deref(run, "run")?;
        let p = c_str(path, "path")?;
        write_run_dir(Path::new(p), &r.inner)?;
        Ok(())
    })
}

// ---- pure helpers ----

/// Temperature softmax over two scores.
#[no_mangle]
pub unsafe extern "C" fn nb_dipw_weights(
    s_scene: f64,
    s_action: f64,
    tau: f64,
    alpha_scene: *mut f64,
    alpha_action: *mut f64,
) -> NbStatus {
    guard(|| {
        let (a, b) = dipw::weights(s_scene, s_action, tau)?;
        *out_param(alpha_scene, "alpha_scene")? = a;
        *out_param(alpha_action, "alpha_action")? = b;
        Ok(())
    })
}

/// Normalized decay weights for `frames` frames written to `out[0..frames]`.
#[no_mangle]
pub unsafe extern "C" fn nb_decay_weights(frames: usize, base: f64, out: *mut f64, capacity: usize) -> NbStatus {
    guard(|| {
        let w = twb::decay_weights(frames, base)?;
        if capacity < frames {
            return Err(fail(NbStatus::BufferTooSmall, format!("{frames} values needed, capacity {capacity}")));
        }
        if out.is_null() {
            return Err(fail(NbStatus::NullArgument, "`out` is null"));
        }
        std::slice::from_raw_parts_mut(out, frames).copy_from_slice(&w.normalized);
        Ok(())
    })
}

/// Blend factor after action-similarity modulation.
#[no_mangle]
pub unsafe extern "C" fn nb_sar_modulate(alpha: f64, similarity: f64, clamp_max: f64, out: *mut f64) -> NbStatus {
    guard(|| {
        *out_param(out, "out")? = sar::modulated_alpha(alpha, similarity, clamp_max)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    unsafe fn last_error() -> String {
        let p = nb_last_error_message();
        assert!(!p.is_null());
        CStr::from_ptr(p).to_string_lossy().into_owned()
    }

    #[test]
    fn null_arguments_are_reported() {
        unsafe {
            assert_eq!(nb_config_default(ptr::null_mut()), NbStatus::NullArgument);
            assert!(last_error().contains("out"));
            let mut w = 0.0;
            assert_eq!(nb_dipw_weights(0.0, 0.0, 0.5, &mut w, ptr::null_mut()), NbStatus::NullArgument);
            assert_eq!(nb_script_len(ptr::null()), 0);
            nb_config_free(ptr::null_mut());
            nb_string_free(ptr::null_mut());
        }
    }

    #[test]
    fn success_clears_last_error() {
        unsafe {
            let mut a = 0.0;
            assert_eq!(nb_sar_modulate(0.9, 0.0, 0.5, &mut a), NbStatus::Argument);
            assert!(!nb_last_error_message().is_null());
            assert_eq!(nb_sar_modulate(0.25, 0.0, 0.5, &mut a), NbStatus::Ok);
            assert!(nb_last_error_message().is_null());
            assert_eq!(a, 0.25);
        }
    }

    #[test]
    fn version_is_nul_terminated() {
        let v = unsafe { CStr::from_ptr(nb_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
