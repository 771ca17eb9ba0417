//! C ABI over `cafm`.
//!
//! Every function returns a [`CafmStatus`]. On failure the message is kept
//! per thread and read with [`cafm_last_error_message`]. Handles are opaque
//! and owned by the caller, who releases them with the matching `_free`.
//! Matrices are row-major `double` buffers.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cafm::config::{ExperimentConfig, Task};
use cafm::error::Error;
use cafm::experiment::{self, Trained};
use cafm::rng;
use cafm::tensor::Tensor;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CafmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    NonFinite = 5,
    Checkpoint = 6,
    Oracle = 7,
    Io = 8,
    Internal = 9,
}

/// Experiment configuration handle.
pub struct CafmConfig {
    inner: ExperimentConfig,
}

/// Trained model handle.
pub struct CafmModel {
    inner: Trained,
}

/// Evaluation summary. `dist_mean` is meaningful only when `has_distance`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CafmMetrics {
    pub swd_mean: f64,
    pub swd_std: f64,
    pub viol_mean: f64,
    pub viol_std: f64,
    pub dist_mean: f64,
    pub has_distance: bool,
    pub trials: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CafmStatus {
    match e {
        Error::Shape { .. } | Error::NonScalarLoss { .. } => CafmStatus::Shape,
        Error::NonFinite { .. } => CafmStatus::NonFinite,
        Error::Checkpoint { .. } | Error::ConfigMismatch { .. } => CafmStatus::Checkpoint,
        Error::Config { .. } | Error::DistanceUnavailable(_) => CafmStatus::Config,
        Error::Oracle { .. } => CafmStatus::Oracle,
        Error::Io { .. } => CafmStatus::Io,
        Error::InvalidArgument(_) | Error::Contract(_) => CafmStatus::InvalidArgument,
        Error::RejectionExhausted { .. } => CafmStatus::Internal,
    }
}

struct Fail(CafmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Fail {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CafmStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status and message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CafmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CafmStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            CafmStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CafmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn cfg_arg<'a>(p: *const CafmConfig) -> Result<&'a CafmConfig, Fail> {
    p.as_ref().ok_or_else(|| null("config"))
}

unsafe fn matrix_arg(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Tensor, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let data = std::slice::from_raw_parts(p, rows * cols).to_vec();
    Ok(Tensor::matrix(rows, cols, data)?)
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread, or NULL after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cafm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Parses a TOML config.
#[no_mangle]
pub unsafe extern "C" fn cafm_config_parse(text: *const c_char, out: *mut *mut CafmConfig) -> CafmStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let inner = ExperimentConfig::parse(text)?;
        *out = Box::into_raw(Box::new(CafmConfig { inner }));
        Ok(())
    })
}

/// Loads a TOML config file.
#[no_mangle]
pub unsafe extern "C" fn cafm_config_load(path: *const c_char, out: *mut *mut CafmConfig) -> CafmStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let inner = ExperimentConfig::load(&path)?;
        *out = Box::into_raw(Box::new(CafmConfig { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cafm_config_free(cfg: *mut CafmConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

#[no_mangle]
pub unsafe extern "C" fn cafm_config_set_seed(cfg: *mut CafmConfig, seed: u64) -> CafmStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("config"))?;
        let mut next = cfg.inner.clone();
        next.train.seed = seed;
        next.validate()?;
        cfg.inner = next;
        Ok(())
    })
}

/// Dimension of the configured task.
#[no_mangle]
pub unsafe extern "C" fn cafm_config_dim(cfg: *const CafmConfig, out: *mut usize) -> CafmStatus {
    guard(|| {
        let cfg = cfg_arg(cfg)?;
        *out.as_mut().ok_or_else(|| null("out"))? = cfg.inner.target().dim();
        Ok(())
    })
}

/// The resolved config as TOML. Release with [`cafm_string_free`].
#[no_mangle]
pub unsafe extern "C" fn cafm_config_to_string(cfg: *const CafmConfig, out: *mut *mut c_char) -> CafmStatus {
    guard(|| {
        let cfg = cfg_arg(cfg)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let text = cfg.inner.to_toml()?;
        *out = CString::new(text).expect("toml has no nul").into_raw();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cafm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Trains the configured method.
#[no_mangle]
pub unsafe extern "C" fn cafm_train(cfg: *const CafmConfig, out: *mut *mut CafmModel) -> CafmStatus {
    guard(|| {
        let cfg = cfg_arg(cfg)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let outcome = experiment::train(&cfg.inner)?;
        *out = Box::into_raw(Box::new(CafmModel { inner: outcome.model }));
        Ok(())
    })
}

/// Loads checkpoints: one path for `fm` / `fm_dd`, two (theta1, theta2)
/// for `fm_re`.
#[no_mangle]
pub unsafe extern "C" fn cafm_model_load(
    cfg: *const CafmConfig,
    paths: *const *const c_char,
    n_paths: usize,
    out: *mut *mut CafmModel,
) -> CafmStatus {
    guard(|| {
        let cfg = cfg_arg(cfg)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if paths.is_null() {
            return Err(null("paths"));
        }
        let paths = std::slice::from_raw_parts(paths, n_paths)
            .iter()
            .map(|&p| str_arg(p, "path").map(PathBuf::from))
            .collect::<Result<Vec<_>, _>>()?;
        let inner = experiment::load_trained(&cfg.inner, &paths)?;
        *out = Box::into_raw(Box::new(CafmModel { inner }));
        Ok(())
    })
}

/// Writes the model's checkpoint file(s) into `dir`.
#[no_mangle]
pub unsafe extern "C" fn cafm_model_save(model: *const CafmModel, dir: *const c_char) -> CafmStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (name, p) in model.inner.checkpoints() {
            p.save(&dir.join(name))?;
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cafm_model_free(model: *mut CafmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Mean-flow samples from the initial points `x0` (`rows x dim`) into
/// `out` (same size).
#[no_mangle]
pub unsafe extern "C" fn cafm_model_sample(
    model: *const CafmModel,
    cfg: *const CafmConfig,
    x0: *const f64,
    rows: usize,
    dim: usize,
    out: *mut f64,
) -> CafmStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let cfg = cfg_arg(cfg)?;
        let x0 = matrix_arg(x0, rows, dim, "x0")?;
        let out = out_slice(out, rows * dim, "out")?;
        let x = model.inner.sample(&cfg.inner.train, &x0)?;
        out.copy_from_slice(x.data());
        Ok(())
    })
}

/// Runs the configured evaluation on `model`.
#[no_mangle]
pub unsafe extern "C" fn cafm_evaluate(
    cfg: *const CafmConfig,
    model: *const CafmModel,
    workers: usize,
    out: *mut CafmMetrics,
) -> CafmStatus {
    guard(|| {
        let cfg = cfg_arg(cfg)?;
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let m = experiment::evaluate(&cfg.inner, &model.inner, workers.max(1))?;
        *out = CafmMetrics {
            swd_mean: m.swd_mean,
            swd_std: m.swd_std,
            viol_mean: m.viol_mean,
            viol_std: m.viol_std,
            dist_mean: m.dist_mean.unwrap_or(f64::NAN),
            has_distance: m.dist_mean.is_some(),
            trials: m.trials.len(),
        };
        Ok(())
    })
}

/// Membership of each row of `x` (`rows x dim`) in the configured set;
/// writes 1 or 0 per row.
#[no_mangle]
pub unsafe extern "C" fn cafm_constraint_contains(
    cfg: *const CafmConfig,
    x: *const f64,
    rows: usize,
    dim: usize,
    out: *mut u8,
) -> CafmStatus {
    guard(|| {
        let cfg = cfg_arg(cfg)?;
        let x = matrix_arg(x, rows, dim, "x")?;
        let out = out_slice(out, rows, "out")?;
        let inside = cfg.inner.constraint().contains_batch(&x)?;
        for (o, c) in out.iter_mut().zip(inside) {
            *o = u8::from(c);
        }
        Ok(())
    })
}

/// `n` samples of a built-in task's target (`box`, `two_boxes`, `ball8`,
/// `ball20`, `subspace`) into `out` (`n x dim`). `dim` must match the task.
#[no_mangle]
pub unsafe extern "C" fn cafm_target_sample(
    task: *const c_char,
    n: usize,
    seed: u64,
    dim: usize,
    out: *mut f64,
) -> CafmStatus {
    guard(|| {
        let task: Task = str_arg(task, "task")?.parse()?;
        let target = task.target(task)?;
        if target.dim() != dim {
            return Err(Fail(
                CafmStatus::Shape,
                format!("task {task} has dimension {}, got {dim}", target.dim()),
            ));
        }
        let out = out_slice(out, n * dim, "out")?;
        let x = target.sample(n, &mut rng::stream(seed, "dump", 0))?;
        out.copy_from_slice(x.data());
        Ok(())
    })
}
