//! C ABI over the `ugfed` simulator.
//!
//! Every fallible call returns a [`UgfedStatus`]; on failure the message is
//! available from [`ugfed_last_error`] on the same thread. Handles are opaque
//! and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ugfed::config::RunConfig;
use ugfed::data::{assign_share_policy, SplitDataset};
use ugfed::federation::{prepare_split, run_training, Simulation};
use ugfed::metrics::write_run;
use ugfed::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UgfedStatus {
    Ok = 0,
    /// Invalid configuration or arguments.
    InvalidConfig = 1,
    /// A non-finite value appeared during training.
    Numeric = 2,
    Io = 3,
    NullPointer = 4,
    /// Text argument is not valid UTF-8.
    InvalidUtf8 = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// Which held-out interactions to score.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UgfedSplit {
    Validation = 0,
    Test = 1,
}

/// Summary of one federated round.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UgfedRoundStats {
    pub round: usize,
    pub participants: usize,
    pub mean_bpr: f64,
    pub mean_cl: f64,
    pub server_loss: f64,
    pub total_loss: f64,
}

/// Macro-averaged ranking metrics.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UgfedMetrics {
    pub k: usize,
    /// Users with at least one held-out item.
    pub users: usize,
    pub recall: f64,
    pub ndcg: f64,
}

/// Opaque run configuration.
pub struct UgfedConfig {
    inner: RunConfig,
}

/// Opaque simulation: dataset split plus federation state.
pub struct UgfedSimulation {
    split: SplitDataset,
    sim: Simulation,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> UgfedStatus {
    match err.exit_code() {
        2 => UgfedStatus::Numeric,
        3 => UgfedStatus::Io,
        _ => UgfedStatus::InvalidConfig,
    }
}

/// Runs `f`, records any error or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), (UgfedStatus, String)>) -> UgfedStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UgfedStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("panic: {msg}"));
            UgfedStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (UgfedStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (UgfedStatus, String) {
    (UgfedStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn text<'a>(s: *const c_char, what: &str) -> Result<&'a str, (UgfedStatus, String)> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| (UgfedStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ugfed_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ugfed_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a configuration holding every default.
///
/// # Safety
/// `out` must be null or valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn ugfed_config_new(out: *mut *mut UgfedConfig) -> UgfedStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(UgfedConfig {
            inner: RunConfig::default(),
        }));
        Ok(())
    })
}

/// Reads a configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writing
/// one pointer.
#[no_mangle]
pub unsafe extern "C" fn ugfed_config_from_file(path: *const c_char, out: *mut *mut UgfedConfig) -> UgfedStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = text(path, "path")?;
        let inner = RunConfig::from_file(Path::new(path)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(UgfedConfig { inner }));
        Ok(())
    })
}

/// Applies one `key=value` override, then validates the whole config.
///
/// # Safety
/// `cfg` must come from a `ugfed_config_*` constructor; `assignment` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ugfed_config_set(cfg: *mut UgfedConfig, assignment: *const c_char) -> UgfedStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        let kv = text(assignment, "assignment")?;
        let mut next = cfg.inner.clone();
        next.set_override(kv)
            .map_err(|m| (UgfedStatus::InvalidConfig, m))?;
        next.validate().map_err(lib_err)?;
        cfg.inner = next;
        Ok(())
    })
}

/// Writes the resolved config, every default included.
///
/// # Safety
/// `cfg` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ugfed_config_save(cfg: *const UgfedConfig, path: *const c_char) -> UgfedStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let path = text(path, "path")?;
        std::fs::write(path, cfg.inner.to_toml_string()).map_err(|e| lib_err(Error::io(path, e)))
    })
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ugfed_config_free(cfg: *mut UgfedConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Trains to completion and writes all run artifacts into `out_dir`.
/// `best` receives the test metrics at the best validation round.
///
/// # Safety
/// `cfg` must be a live handle, `out_dir` a NUL-terminated string, and `best`
/// null or valid for writing.
#[no_mangle]
pub unsafe extern "C" fn ugfed_train(
    cfg: *const UgfedConfig,
    out_dir: *const c_char,
    best: *mut UgfedMetrics,
) -> UgfedStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let dir = text(out_dir, "out_dir")?;
        let mut run = cfg.inner.clone();
        run.out_dir = dir.to_string();
        let outcome = run_training(&run).map_err(lib_err)?;
        write_run(Path::new(dir), &run, &outcome).map_err(lib_err)?;
        if let Some(b) = best.as_mut() {
            let t = &outcome.best_record().test;
            *b = UgfedMetrics {
                k: t.k,
                users: t.per_user.len(),
                recall: t.recall,
                ndcg: t.ndcg,
            };
        }
        Ok(())
    })
}

/// Prepares the data, share policy and mended server graph for stepwise
/// training. The config is copied; the handle may be freed afterwards.
///
/// # Safety
/// `cfg` must be a live handle; `out` valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn ugfed_simulation_new(
    cfg: *const UgfedConfig,
    out: *mut *mut UgfedSimulation,
) -> UgfedStatus {
    guard(|| {
        let cfg = &cfg.as_ref().ok_or_else(|| null("cfg"))?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        cfg.validate().map_err(lib_err)?;
        let split = prepare_split(cfg).map_err(lib_err)?;
        let policy = assign_share_policy(&split, cfg.share(), cfg.policy_seed);
        let sim = Simulation::new(&split, policy, cfg.hyper.clone(), cfg.train_seed).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(UgfedSimulation { split, sim }));
        Ok(())
    })
}

/// Runs one federated round.
///
/// # Safety
/// `sim` must be a live handle; `stats` null or valid for writing.
#[no_mangle]
pub unsafe extern "C" fn ugfed_simulation_run_round(
    sim: *mut UgfedSimulation,
    stats: *mut UgfedRoundStats,
) -> UgfedStatus {
    guard(|| {
        let s = sim.as_mut().ok_or_else(|| null("sim"))?;
        let r = s.sim.run_round().map_err(lib_err)?;
        if let Some(out) = stats.as_mut() {
            *out = UgfedRoundStats {
                round: r.round,
                participants: r.participants.len(),
                mean_bpr: r.mean_bpr,
                mean_cl: r.mean_cl,
                server_loss: r.server_loss,
                total_loss: r.total_loss,
            };
        }
        Ok(())
    })
}

/// Scores the current model on the validation or test interactions.
///
/// # Safety
/// `sim` must be a live handle; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn ugfed_simulation_evaluate(
    sim: *const UgfedSimulation,
    split: UgfedSplit,
    out: *mut UgfedMetrics,
) -> UgfedStatus {
    guard(|| {
        let s = sim.as_ref().ok_or_else(|| null("sim"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let relevant = match split {
            UgfedSplit::Validation => &s.split.val,
            UgfedSplit::Test => &s.split.test,
        };
        let res = s.sim.evaluate(relevant);
        *out = UgfedMetrics {
            k: res.k,
            users: res.per_user.len(),
            recall: res.recall,
            ndcg: res.ndcg,
        };
        Ok(())
    })
}

/// Rounds completed so far; 0 for a null handle.
///
/// # Safety
/// `sim` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ugfed_simulation_round(sim: *const UgfedSimulation) -> usize {
    sim.as_ref().map_or(0, |s| s.sim.round)
}

/// Number of users and items after filtering.
///
/// # Safety
/// `sim` must be a live handle; `users` and `items` null or valid for writing.
#[no_mangle]
pub unsafe extern "C" fn ugfed_simulation_shape(
    sim: *const UgfedSimulation,
    users: *mut usize,
    items: *mut usize,
) -> UgfedStatus {
    guard(|| {
        let s = sim.as_ref().ok_or_else(|| null("sim"))?;
        if let Some(u) = users.as_mut() {
            *u = s.split.n_users();
        }
        if let Some(i) = items.as_mut() {
            *i = s.split.n_items();
        }
        Ok(())
    })
}

/// # Safety
/// `sim` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ugfed_simulation_free(sim: *mut UgfedSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}
