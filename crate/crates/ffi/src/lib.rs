//! C ABI over scrat-core.
//!
//! Every entry point returns a status code (`SCRAT_OK` or a negative error)
//! and writes results through out-pointers. Handles are opaque and must be
//! released with their matching `*_free`. On error, `scrat_last_error`
//! returns a message owned by the library that stays valid until the next
//! call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use scrat_core::harness::{self, ExperimentConfig, ResultSet};
use scrat_core::ledger::wilson_interval;
use scrat_core::memory::{LandmarkSet, MemoryStore, MemoryVariant, Query};
use scrat_core::observer::{self, Cell, ObservedEvent, ObserverBelief, ObserverParams};
use scrat_core::Error;

pub const SCRAT_OK: i32 = 0;
pub const SCRAT_ERR_NULL: i32 = -1;
pub const SCRAT_ERR_UTF8: i32 = -2;
pub const SCRAT_ERR_CONFIG: i32 = -3;
pub const SCRAT_ERR_INPUT: i32 = -4;
pub const SCRAT_ERR_RUNTIME: i32 = -5;
pub const SCRAT_ERR_PANIC: i32 = -6;

pub const SCRAT_MEMORY_FLAT: i32 = 0;
pub const SCRAT_MEMORY_CLUSTERED: i32 = 1;

/// Parsed and validated experiment config.
pub struct ScratConfig(ExperimentConfig);

/// Results of a grid run.
pub struct ScratResults(ResultSet);

pub struct ScratMemory(MemoryStore);

pub struct ScratObserver(ObserverBelief);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Json(_) => SCRAT_ERR_CONFIG,
            Error::Schema(_) | Error::Input(_) | Error::UnknownMetric { .. } => SCRAT_ERR_INPUT,
            Error::Invariant(_) | Error::Io(_) => SCRAT_ERR_RUNTIME,
        };
        Failure(code, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(SCRAT_ERR_INPUT, format!("json error: {e}"))
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SCRAT_OK
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("panic inside scrat");
            SCRAT_ERR_PANIC
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SCRAT_ERR_NULL, format!("`{what}` is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SCRAT_ERR_UTF8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure(SCRAT_ERR_RUNTIME, "string contains a NUL byte".into()))?;
    put(out, c.into_raw(), "out")
}

unsafe fn put_box<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    put(out, Box::into_raw(Box::new(value)), "out")
}

/// Message for the last failed call on this thread; empty after a success.
#[no_mangle]
pub extern "C" fn scrat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn scrat_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!("scrat ", env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

/// Frees a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn scrat_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Wilson score interval for `successes` out of `n`.
///
/// # Safety
/// `lo` and `hi` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn scrat_wilson_interval(successes: u64, n: u64, z: f64, lo: *mut f64, hi: *mut f64) -> i32 {
    guard(|| {
        if successes > n || !(z.is_finite() && z > 0.0) {
            return Err(Failure(SCRAT_ERR_INPUT, format!("need successes <= n and z > 0, got {successes}/{n}, z={z}")));
        }
        let (l, h) = wilson_interval(successes as usize, n as usize, z);
        put(lo, l, "lo")?;
        put(hi, h, "hi")
    })
}

/// Parses and validates an experiment config document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn scrat_config_parse(json: *const c_char, out: *mut *mut ScratConfig) -> i32 {
    guard(|| {
        let cfg = harness::parse_config(text(json, "json")?)?;
        put_box(out, ScratConfig(cfg))
    })
}

/// Replaces the seed range with `start..end`.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn scrat_config_set_seeds(config: *mut ScratConfig, start: u64, end: u64) -> i32 {
    guard(|| {
        let cfg = handle_mut(config, "config")?;
        let mut next = cfg.0.clone();
        next.seeds = harness::SeedRange { start, end };
        harness::validate(&next)?;
        cfg.0 = next;
        Ok(())
    })
}

/// The resolved config as JSON; free with `scrat_string_free`.
///
/// # Safety
/// `config` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn scrat_config_echo(config: *const ScratConfig, out: *mut *mut c_char) -> i32 {
    guard(|| {
        let cfg = handle(config, "config")?;
        put_string(out, harness::echo(&cfg.0)?)
    })
}

/// # Safety
/// `config` must be null or a handle from `scrat_config_parse`.
#[no_mangle]
pub unsafe extern "C" fn scrat_config_free(config: *mut ScratConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs every cell of the grid on `jobs` workers (0 means one).
///
/// # Safety
/// `config` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn scrat_run_grid(config: *const ScratConfig, jobs: u32, out: *mut *mut ScratResults) -> i32 {
    guard(|| {
        let cfg = handle(config, "config")?;
        let results = harness::run_grid(&cfg.0, jobs.max(1) as usize)?;
        put_box(out, ScratResults(results))
    })
}

/// Total and failed cell counts.
///
/// # Safety
/// `results` must be a live handle; `total` and `failed` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn scrat_results_counts(results: *const ScratResults, total: *mut u64, failed: *mut u64) -> i32 {
    guard(|| {
        let r = handle(results, "results")?;
        put(total, r.0.records().count() as u64, "total")?;
        put(failed, r.0.failed_cells() as u64, "failed")
    })
}

/// One JSON run record per line, in (variant, seed) order.
///
/// # Safety
/// `results` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn scrat_results_runs_jsonl(results: *const ScratResults, out: *mut *mut c_char) -> i32 {
    guard(|| {
        let r = handle(results, "results")?;
        let mut s = String::new();
        for rec in r.0.records() {
            s.push_str(&serde_json::to_string(rec)?);
            s.push('\n');
        }
        put_string(out, s)
    })
}

/// Writes the full report directory.
///
/// # Safety
/// `results` must be a live handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn scrat_results_write_report(results: *mut ScratResults, dir: *const c_char) -> i32 {
    guard(|| {
        let r = handle_mut(results, "results")?;
        let dir = text(dir, "dir")?;
        harness::write_report(&mut r.0, Path::new(dir))?;
        Ok(())
    })
}

/// # Safety
/// `results` must be null or a handle from `scrat_run_grid`.
#[no_mangle]
pub unsafe extern "C" fn scrat_results_free(results: *mut ScratResults) {
    if !results.is_null() {
        drop(Box::from_raw(results));
    }
}

fn memory_variant(v: i32) -> Result<MemoryVariant, Failure> {
    match v {
        SCRAT_MEMORY_FLAT => Ok(MemoryVariant::FlatArchive),
        SCRAT_MEMORY_CLUSTERED => Ok(MemoryVariant::ClusteredIndex),
        _ => Err(Failure(SCRAT_ERR_INPUT, format!("unknown memory variant {v}"))),
    }
}

/// Builds a store from a JSON array of episode records (as written by
/// the store's own serializer).
///
/// # Safety
/// `episodes_json` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn scrat_memory_from_json(variant: i32, episodes_json: *const c_char, out: *mut *mut ScratMemory) -> i32 {
    guard(|| {
        let store = MemoryStore::from_json(memory_variant(variant)?, text(episodes_json, "episodes_json")?)?;
        put_box(out, ScratMemory(store))
    })
}

/// # Safety
/// `memory` must be a live handle; `len` and `probes` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn scrat_memory_stats(memory: *const ScratMemory, len: *mut u64, probes: *mut u64) -> i32 {
    guard(|| {
        let m = handle(memory, "memory")?;
        put(len, m.0.len() as u64, "len")?;
        put(probes, m.0.probe_counter(), "probes")
    })
}

/// Runs a retrieval. `query_json` is a serialized query and `landmarks_json`
/// the current landmark list; the result is the retrieval as JSON.
///
/// # Safety
/// `memory` must be a live handle; strings NUL-terminated; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn scrat_memory_retrieve(
    memory: *mut ScratMemory,
    query_json: *const c_char,
    landmarks_json: *const c_char,
    out: *mut *mut c_char,
) -> i32 {
    guard(|| {
        let m = handle_mut(memory, "memory")?;
        let query: Query = serde_json::from_str(text(query_json, "query_json")?)?;
        let landmarks: LandmarkSet = serde_json::from_str(text(landmarks_json, "landmarks_json")?)?;
        let r = m.0.retrieve(&query, &landmarks)?;
        put_string(out, serde_json::to_string(&r)?)
    })
}

/// # Safety
/// `memory` must be null or a handle from `scrat_memory_from_json`.
#[no_mangle]
pub unsafe extern "C" fn scrat_memory_free(memory: *mut ScratMemory) {
    if !memory.is_null() {
        drop(Box::from_raw(memory));
    }
}

/// Uniform observer belief with default kernels.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn scrat_observer_uniform(diffusion_rate: f64, out: *mut *mut ScratObserver) -> i32 {
    guard(|| {
        let b = ObserverBelief::uniform(diffusion_rate, ObserverParams::default())?;
        put_box(out, ScratObserver(b))
    })
}

/// Applies one serialized observed event in place.
///
/// # Safety
/// `belief` must be a live handle; `event_json` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn scrat_observer_update(belief: *mut ScratObserver, event_json: *const c_char) -> i32 {
    guard(|| {
        let b = handle_mut(belief, "belief")?;
        let event: ObservedEvent = serde_json::from_str(text(event_json, "event_json")?)?;
        b.0 = observer::observer_update(&b.0, event)?;
        Ok(())
    })
}

/// Mass on one grid cell.
///
/// # Safety
/// `belief` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn scrat_observer_mass(belief: *const ScratObserver, row: u32, col: u32, out: *mut f64) -> i32 {
    guard(|| {
        let b = handle(belief, "belief")?;
        let cell = Cell::new(row as usize, col as usize);
        if !cell.in_grid() {
            return Err(Failure(SCRAT_ERR_INPUT, format!("cell ({row}, {col}) outside grid")));
        }
        put(out, b.0.mass(cell), "out")
    })
}

/// Leakage score against `n` true caches given as row/col pairs.
///
/// # Safety
/// `belief` must be a live handle; `rows` and `cols` must point to `n` values.
#[no_mangle]
pub unsafe extern "C" fn scrat_observer_leakage(
    belief: *const ScratObserver,
    rows: *const u32,
    cols: *const u32,
    n: usize,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let b = handle(belief, "belief")?;
        if n > 0 && (rows.is_null() || cols.is_null()) {
            return Err(null("rows/cols"));
        }
        let cells: Vec<Cell> = (0..n)
            .map(|i| Cell::new(*rows.add(i) as usize, *cols.add(i) as usize))
            .collect();
        put(out, observer::leakage_score(&b.0, &cells)?, "out")
    })
}

/// # Safety
/// `belief` must be null or a handle from `scrat_observer_uniform`.
#[no_mangle]
pub unsafe extern "C" fn scrat_observer_free(belief: *mut ScratObserver) {
    if !belief.is_null() {
        drop(Box::from_raw(belief));
    }
}
