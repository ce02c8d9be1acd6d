//! C ABI over the `cindm` library.
//!
//! Every fallible function returns a [`CindmStatus`]. On failure the message
//! is kept per thread and can be read with [`cindm_last_error`]. Objects are
//! opaque handles created by `*_new`/`*_load` functions and released with the
//! matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cindm::compose::{build_plan, design, DesignOutput};
use cindm::config::RunConfig;
use cindm::eval;
use cindm::pipeline::{self, PAIR_MODEL};
use cindm::sim::{self, BallState, FEATURES};
use cindm::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CindmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    InvalidState = 5,
    NonFinite = 6,
    Format = 7,
    Io = 8,
    MissingCheckpoint = 9,
    Panic = 10,
}

/// Run configuration (all sections).
pub struct CindmConfig(RunConfig);

/// Trained denoiser ready for sampling.
pub struct CindmModel(cindm::compose::ModelRegistry);

/// Designs for one scenario: initial states and, optionally, trajectories.
pub struct CindmDesign(DesignOutput);

/// Metrics of a design re-simulated by the solver.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CindmEvaluation {
    pub design_obj: f64,
    /// Valid only when `has_mae` is nonzero.
    pub mae: f64,
    pub has_mae: i32,
    pub projection: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CindmStatus {
    match e {
        Error::Shape { .. } => CindmStatus::Shape,
        Error::InvalidState(_) | Error::InfeasiblePacking { .. } | Error::CoverageGap { .. } => CindmStatus::InvalidState,
        Error::NonFinite(_) => CindmStatus::NonFinite,
        Error::Config(_) | Error::WindowStride { .. } => CindmStatus::Config,
        Error::Format(_) => CindmStatus::Format,
        Error::MissingCheckpoint(_) => CindmStatus::MissingCheckpoint,
        Error::Io(_) => CindmStatus::Io,
    }
}

struct Fail(CindmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CindmStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CindmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CindmStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CindmStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CindmStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err(Fail(
            CindmStatus::Shape,
            format!("{what} holds {len} values, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cindm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cindm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default configuration.
#[no_mangle]
pub extern "C" fn cindm_config_new() -> *mut CindmConfig {
    Box::into_raw(Box::new(CindmConfig(RunConfig::default())))
}

/// Reads a TOML configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cindm_config_load(path: *const c_char, out: *mut *mut CindmConfig) -> CindmStatus {
    guard(|| {
        let cfg = RunConfig::load(&path_arg(path)?)?;
        store(out, CindmConfig(cfg))
    })
}

/// Overrides every component seed.
///
/// # Safety
/// `config` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn cindm_config_set_seed(config: *mut CindmConfig, seed: u64) -> CindmStatus {
    guard(|| {
        let c = config.as_mut().ok_or_else(|| null("config"))?;
        c.0 = c.0.clone().with_seed(seed);
        Ok(())
    })
}

/// Sets the guidance weight and diffusion step count used by `cindm_design`.
///
/// # Safety
/// `config` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn cindm_config_set_sampler(config: *mut CindmConfig, lambda: f64, steps: usize) -> CindmStatus {
    guard(|| {
        let c = config.as_mut().ok_or_else(|| null("config"))?;
        let mut next = c.0.clone();
        next.sampler.lambda = lambda;
        next.sampler.steps = steps;
        next.sampler.validate()?;
        c.0 = next;
        Ok(())
    })
}

/// # Safety
/// `config` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn cindm_config_free(config: *mut CindmConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Simulates `n_bodies` balls from `gamma` (`[n_bodies][4]`: x, y, vx, vy in
/// box units) for `n_frames` recorded frames into `out`
/// (`n_frames * n_bodies * 4` values).
///
/// # Safety
/// Pointers must reference arrays of at least the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn cindm_rollout(
    config: *const CindmConfig,
    gamma: *const f64,
    n_bodies: usize,
    n_frames: usize,
    out: *mut f64,
    out_len: usize,
) -> CindmStatus {
    guard(|| {
        let cfg = &handle(config, "config")?.0;
        let g = slice_arg(gamma, n_bodies * FEATURES, "gamma")?;
        let states: Vec<BallState> = g.chunks_exact(FEATURES).map(|c| BallState::new(c[0], c[1], c[2], c[3])).collect();
        if n_frames == 0 || n_bodies == 0 {
            return Err(Fail(CindmStatus::InvalidArgument, "n_bodies and n_frames must be positive".into()));
        }
        let sim_cfg = sim::SimConfig {
            n_bodies,
            ..cfg.sim.with_frames(n_frames)
        };
        let traj = sim::rollout(&states, &sim_cfg)?;
        out_slice(out, out_len, traj.data.len(), "out")?.copy_from_slice(&traj.data);
        Ok(())
    })
}

/// Re-simulates `gamma` and scores it against the configured objective.
/// `designed` may be null; otherwise it holds the designed trajectory
/// (`n_frames * n_bodies * 4` values) and the MAE is reported.
///
/// # Safety
/// Pointers must reference arrays of at least the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn cindm_evaluate(
    config: *const CindmConfig,
    gamma: *const f64,
    n_bodies: usize,
    designed: *const f64,
    n_frames: usize,
    out: *mut CindmEvaluation,
) -> CindmStatus {
    guard(|| {
        let cfg = &handle(config, "config")?.0;
        let g = slice_arg(gamma, n_bodies * FEATURES, "gamma")?;
        let d = if designed.is_null() {
            None
        } else {
            Some(slice_arg(designed, n_frames * n_bodies * FEATURES, "designed")?)
        };
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let (e, _) = eval::evaluate(g, d, n_frames, &cfg.sim, &cfg.objective)?;
        *out = CindmEvaluation {
            design_obj: e.design_obj,
            mae: e.mae.unwrap_or(0.0),
            has_mae: e.mae.is_some() as i32,
            projection: e.projection,
        };
        Ok(())
    })
}

/// Loads a trained denoiser checkpoint (EMA weights).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cindm_model_load(path: *const c_char, out: *mut *mut CindmModel) -> CindmStatus {
    guard(|| {
        let p = path_arg(path)?;
        let trained = pipeline::load_denoiser(&p)?.ok_or_else(|| Fail::from(Error::MissingCheckpoint(p)))?;
        store(out, CindmModel(pipeline::registry_from(&trained)?))
    })
}

/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn cindm_model_free(model: *mut CindmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Compositional guided design of `n_runs` initial states for `n_bodies`
/// balls over `n_frames` frames, using the sampler, objective and
/// composition settings of `config`.
///
/// # Safety
/// Handles must come from this library and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cindm_design(
    model: *const CindmModel,
    config: *const CindmConfig,
    n_bodies: usize,
    n_frames: usize,
    n_runs: usize,
    out: *mut *mut CindmDesign,
) -> CindmStatus {
    guard(|| {
        let reg = &handle(model, "model")?.0;
        let cfg = &handle(config, "config")?.0;
        let e = &cfg.experiment;
        let plan = build_plan(n_bodies, n_frames, e.t_tr, e.t_q, reg, PAIR_MODEL)?;
        let d = design(&plan, &cfg.objective, &cfg.sampler, reg, n_runs)?;
        store(out, CindmDesign(d))
    })
}

/// Reads a design file written by `cindm_design_save` or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cindm_design_load(path: *const c_char, out: *mut *mut CindmDesign) -> CindmStatus {
    guard(|| {
        let d = DesignOutput::load(&path_arg(path)?)?;
        store(out, CindmDesign(d))
    })
}

/// # Safety
/// `design` must come from this library and `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cindm_design_save(design: *const CindmDesign, path: *const c_char) -> CindmStatus {
    guard(|| {
        let d = &handle(design, "design")?.0;
        d.save(&path_arg(path)?)?;
        Ok(())
    })
}

/// Writes run count, bodies and frames of a design. Any output may be null.
///
/// # Safety
/// `design` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn cindm_design_shape(
    design: *const CindmDesign,
    n_runs: *mut usize,
    n_bodies: *mut usize,
    n_frames: *mut usize,
) -> CindmStatus {
    guard(|| {
        let h = &handle(design, "design")?.0.header;
        for (p, v) in [(n_runs, h.n_runs), (n_bodies, h.n_bodies), (n_frames, h.n_frames)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies the initial state of run `run` (`n_bodies * 4` values).
///
/// # Safety
/// `out` must hold `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn cindm_design_gamma(design: *const CindmDesign, run: usize, out: *mut f64, out_len: usize) -> CindmStatus {
    guard(|| {
        let d = &handle(design, "design")?.0;
        if run >= d.header.n_runs {
            return Err(Fail(CindmStatus::InvalidArgument, format!("run {run} out of range")));
        }
        let g = d.gamma_of(run);
        out_slice(out, out_len, g.len(), "out")?.copy_from_slice(g);
        Ok(())
    })
}

/// Copies the designed trajectory of run `run`
/// (`n_frames * n_bodies * 4` values). Fails with `InvalidState` when the
/// design carries no trajectories.
///
/// # Safety
/// `out` must hold `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn cindm_design_trajectory(design: *const CindmDesign, run: usize, out: *mut f64, out_len: usize) -> CindmStatus {
    guard(|| {
        let d = &handle(design, "design")?.0;
        if run >= d.header.n_runs {
            return Err(Fail(CindmStatus::InvalidArgument, format!("run {run} out of range")));
        }
        let t = d
            .trajectory_of(run)
            .ok_or_else(|| Fail(CindmStatus::InvalidState, "design has no trajectories".into()))?;
        out_slice(out, out_len, t.len(), "out")?.copy_from_slice(t);
        Ok(())
    })
}

/// # Safety
/// `design` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn cindm_design_free(design: *mut CindmDesign) {
    if !design.is_null() {
        drop(Box::from_raw(design));
    }
}
