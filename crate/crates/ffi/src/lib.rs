//! C ABI over the simulator: opaque world and denoiser handles, score and latency
//! functions, and one sampling entry point. Every function returns an [`FgscStatus`];
//! on failure the message is kept per thread and read with [`fgsc_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use fastgsc::diffusion::{initial_noise, run_segmented_sampling, DenoiserModel, SamplingConfig};
use fastgsc::error::Error;
use fastgsc::timeline::{conventional_timeline, pgsc_timeline, ArrivalSchedule, LatencyConfig, LatencyReport, PhaseDispatch};
use fastgsc::toyworld::{score_ids, WorldConfig, WorldSpec};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FgscStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ConfigInvalid = 3,
    MissingCheckpoint = 4,
    NumericalDivergence = 5,
    BufferTooSmall = 6,
    Io = 7,
    Panic = 8,
}

/// Generated world: unit table, offsets and noise level.
pub struct FgscWorld {
    inner: WorldSpec,
}

/// Trained conditional denoiser loaded from a checkpoint.
pub struct FgscDenoiser {
    inner: DenoiserModel,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct FgscLatency {
    pub tau_e: f64,
    pub tau_m: f64,
    pub m_steps: usize,
    pub segment: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FgscLatencyReport {
    pub total_latency: f64,
    pub residual_latency: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

type Fail = (FgscStatus, String);

fn status_of(e: &Error) -> FgscStatus {
    match e {
        Error::ConfigInvalid(_) | Error::Json(_) => FgscStatus::ConfigInvalid,
        Error::MissingCheckpoint(_) => FgscStatus::MissingCheckpoint,
        Error::NonFiniteLoss(_) => FgscStatus::NumericalDivergence,
        Error::Io(_) | Error::Csv(_) | Error::Checkpoint(_) => FgscStatus::Io,
        _ => FgscStatus::InvalidArgument,
    }
}

fn core(e: Error) -> Fail {
    (status_of(&e), e.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FgscStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (FgscStatus::Ok, String::new()),
        Ok(Err(fail)) => fail,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            (FgscStatus::Panic, msg)
        }
    };
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

fn null(what: &str) -> Fail {
    (FgscStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out_slice<'a, T>(ptr: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len < need {
        return Err((FgscStatus::BufferTooSmall, format!("{what} holds {len}, needs {need}")));
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn write<T>(ptr: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    ptr.write(v);
    Ok(())
}

unsafe fn world<'a>(w: *const FgscWorld) -> Result<&'a WorldSpec, Fail> {
    w.as_ref().map(|w| &w.inner).ok_or_else(|| null("world"))
}

fn latency(l: &FgscLatency) -> Result<LatencyConfig, Fail> {
    let cfg = LatencyConfig { tau_e: l.tau_e, tau_m: l.tau_m, m_steps: l.m_steps, segment: l.segment, ..Default::default() };
    cfg.validate().map_err(core)?;
    Ok(cfg)
}

fn report(r: &LatencyReport) -> FgscLatencyReport {
    FgscLatencyReport { total_latency: r.total_latency, residual_latency: r.residual_latency }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fgsc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the calling thread's last error message into `buf` (truncated, always
/// NUL-terminated when `len > 0`). Returns the full message length plus one.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn fgsc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len() + 1
    })
}

/// Generates the default world from `seed`.
///
/// # Safety
/// `out` must be valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn fgsc_world_new(seed: u64, out: *mut *mut FgscWorld) -> FgscStatus {
    guard(|| {
        let inner = WorldSpec::generate(seed, &WorldConfig::default()).map_err(core)?;
        write(out, Box::into_raw(Box::new(FgscWorld { inner })), "out")
    })
}

/// # Safety
/// `w` must come from [`fgsc_world_new`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fgsc_world_free(w: *mut FgscWorld) {
    if !w.is_null() {
        drop(Box::from_raw(w));
    }
}

/// Latent dimension and number of units in the table.
///
/// # Safety
/// `w` must be a live world; `dim` and `n_units` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn fgsc_world_shape(w: *const FgscWorld, dim: *mut usize, n_units: *mut usize) -> FgscStatus {
    guard(|| {
        let w = world(w)?;
        write(dim, w.dim(), "dim")?;
        write(n_units, w.table.units.len(), "n_units")
    })
}

/// Draws a clean sample for the prompt `ids[0..n]` into `out[0..dim]`.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn fgsc_world_sample_clean(
    w: *const FgscWorld,
    ids: *const usize,
    n: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> FgscStatus {
    guard(|| {
        let w = world(w)?;
        let ids = slice(ids, n, "ids")?;
        let out = out_slice(out, out_len, w.dim(), "out")?;
        if ids.is_empty() {
            return Err(core(Error::EmptyPrompt));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= w.table.units.len()) {
            return Err(core(Error::InvalidUnit(format!("id {bad}"))));
        }
        let x = w.sample_clean(&ids.iter().copied().collect(), &mut w.rng(seed));
        out[..x.len()].copy_from_slice(&x);
        Ok(())
    })
}

/// Score of `sample[0..dim]` against the prompt `ids[0..n]`, in [0, 1].
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn fgsc_score(
    w: *const FgscWorld,
    sample: *const f64,
    dim: usize,
    ids: *const usize,
    n: usize,
    out: *mut f64,
) -> FgscStatus {
    guard(|| {
        let w = world(w)?;
        let sample = slice(sample, dim, "sample")?;
        if dim != w.dim() {
            return Err((FgscStatus::InvalidArgument, format!("sample has {dim} entries, world has {}", w.dim())));
        }
        let s = score_ids(&w.table, sample, slice(ids, n, "ids")?).map_err(core)?;
        write(out, s, "out")
    })
}

/// Latency of sending `n_units` before denoising starts.
///
/// # Safety
/// `lat` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fgsc_conventional_latency(
    lat: *const FgscLatency,
    n_units: usize,
    out: *mut FgscLatencyReport,
) -> FgscStatus {
    guard(|| {
        let cfg = latency(lat.as_ref().ok_or_else(|| null("lat"))?)?;
        let (r, _) = conventional_timeline(n_units, &cfg).map_err(core)?;
        write(out, report(&r), "out")
    })
}

/// Latency of a parallel schedule extracting `counts[p]` units in phase `p`.
///
/// # Safety
/// `lat`, `out` and `counts[0..n_phases]` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fgsc_pgsc_latency(
    lat: *const FgscLatency,
    counts: *const usize,
    n_phases: usize,
    out: *mut FgscLatencyReport,
) -> FgscStatus {
    guard(|| {
        let cfg = latency(lat.as_ref().ok_or_else(|| null("lat"))?)?;
        let mut next = 0;
        let phases: Vec<PhaseDispatch> = slice(counts, n_phases, "counts")?
            .iter()
            .map(|&c| {
                next += c;
                PhaseDispatch::new((next - c..next).collect())
            })
            .collect();
        let (r, _) = pgsc_timeline(&phases, &cfg).map_err(core)?;
        write(out, report(&r), "out")
    })
}

/// Loads a denoiser checkpoint from a NUL-terminated UTF-8 path.
///
/// # Safety
/// `path` must be a valid C string and `out` valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn fgsc_denoiser_load(path: *const c_char, out: *mut *mut FgscDenoiser) -> FgscStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|e| (FgscStatus::InvalidArgument, e.to_string()))?;
        let inner = DenoiserModel::load(Path::new(path)).map_err(core)?;
        write(out, Box::into_raw(Box::new(FgscDenoiser { inner })), "out")
    })
}

/// # Safety
/// `d` must come from [`fgsc_denoiser_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fgsc_denoiser_free(d: *mut FgscDenoiser) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Segmented sampling with the default sampler settings and correction strength
/// `alpha`: unit `ids[k]` joins the condition at denoising step `arrival_steps[k]`
/// (a segment boundary, or `M` for never). The result goes to `out[0..dim]`.
///
/// # Safety
/// Handles must be live and pointers valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn fgsc_sample(
    w: *const FgscWorld,
    d: *const FgscDenoiser,
    ids: *const usize,
    arrival_steps: *const usize,
    n: usize,
    alpha: f64,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> FgscStatus {
    guard(|| {
        let w = world(w)?;
        let model = &d.as_ref().ok_or_else(|| null("denoiser"))?.inner;
        if model.meta.world_seed != w.seed || model.meta.dim != w.dim() {
            return Err((FgscStatus::ConfigInvalid, "denoiser was trained on a different world".into()));
        }
        let ids = slice(ids, n, "ids")?;
        let steps = slice(arrival_steps, n, "arrival_steps")?;
        let out = out_slice(out, out_len, w.dim(), "out")?;
        let cfg = SamplingConfig { alpha, ..Default::default() };
        cfg.validate(&model.schedule).map_err(core)?;
        let mut schedule = ArrivalSchedule::default();
        for (&id, &step) in ids.iter().zip(steps) {
            if id >= w.table.units.len() {
                return Err(core(Error::InvalidUnit(format!("id {id}"))));
            }
            if step >= cfg.m_steps {
                schedule.dropped.insert(id);
            } else {
                schedule.deliver(step, [id]);
            }
        }
        let x = run_segmented_sampling(model, &w.table, &schedule, &cfg, initial_noise(seed, w.dim()), Some(ids.to_vec()))
            .map_err(core)?
            .x0;
        out[..x.len()].copy_from_slice(&x);
        Ok(())
    })
}
