//! C interface to the fedoap experiments.
//!
//! Every function returns a [`FedoapStatus`]; results go through out
//! pointers. On failure the message is kept per thread and read back with
//! [`fedoap_last_error`]. Handles are opaque and owned by the caller, who
//! releases them with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fedoap::autodiff::Tensor;
use fedoap::calibration::dice_score;
use fedoap::fed_protocol::transmission_bytes;
use fedoap::harness::{cmd_train, ExperimentConfig, HarnessError, RunReport};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedoapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Io = 5,
    Protocol = 6,
    Data = 7,
    FormulaMismatch = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Experiment configuration.
pub struct FedoapConfig {
    inner: ExperimentConfig,
}

/// Result of a training run.
pub struct FedoapReport {
    inner: RunReport,
    json: String,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: FedoapStatus, msg: impl Into<String>) -> FedoapStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn harness_status(e: HarnessError) -> FedoapStatus {
    let status = match &e {
        HarnessError::Config(_) => FedoapStatus::Config,
        HarnessError::Io(_) => FedoapStatus::Io,
        HarnessError::Fed(_) => FedoapStatus::Protocol,
        HarnessError::Synth(_) => FedoapStatus::Data,
        HarnessError::FormulaMeasurementMismatch { .. } => FedoapStatus::FormulaMismatch,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> FedoapStatus) -> FedoapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == FedoapStatus::Ok {
                LAST_ERROR.with(|e| e.borrow_mut().clear());
            }
            status
        }
        Err(_) => fail(FedoapStatus::Panic, "internal panic"),
    }
}

macro_rules! nonnull {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(FedoapStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fedoap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`) and returns the full message
/// length without the terminator. Empty after a successful call.
///
/// # Safety
/// `buf` is null or points to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fedoap_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Default configuration.
///
/// # Safety
/// `out` is null or points to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn fedoap_config_default(out: *mut *mut FedoapConfig) -> FedoapStatus {
    guard(|| {
        nonnull!(out);
        *out = Box::into_raw(Box::new(FedoapConfig {
            inner: ExperimentConfig::default(),
        }));
        FedoapStatus::Ok
    })
}

/// Configuration from a flat JSON object with the same keys as the CLI
/// config file; missing keys take their defaults.
///
/// # Safety
/// `json` is null or a NUL-terminated string; `out` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn fedoap_config_from_json(json: *const c_char, out: *mut *mut FedoapConfig) -> FedoapStatus {
    guard(|| {
        nonnull!(json, out);
        let text = match CStr::from_ptr(json).to_str() {
            Ok(t) => t,
            Err(e) => return fail(FedoapStatus::InvalidUtf8, e.to_string()),
        };
        let inner: ExperimentConfig = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => return fail(FedoapStatus::Config, e.to_string()),
        };
        if let Err(e) = inner.validate() {
            return harness_status(e);
        }
        *out = Box::into_raw(Box::new(FedoapConfig { inner }));
        FedoapStatus::Ok
    })
}

/// # Safety
/// `config` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fedoap_config_free(config: *mut FedoapConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs alignment, fine-tuning and test evaluation for every configured
/// seed. Blocks until done.
///
/// # Safety
/// `config` is a live handle or null; `out` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn fedoap_train(config: *const FedoapConfig, out: *mut *mut FedoapReport) -> FedoapStatus {
    guard(|| {
        nonnull!(config, out);
        let report = match cmd_train(&(&*config).inner) {
            Ok(r) => r,
            Err(e) => return harness_status(e),
        };
        let json = match serde_json::to_string(&report) {
            Ok(j) => j,
            Err(e) => return fail(FedoapStatus::Io, e.to_string()),
        };
        *out = Box::into_raw(Box::new(FedoapReport { inner: report, json }));
        FedoapStatus::Ok
    })
}

/// Mean test Dice over clients, averaged over seeds.
///
/// # Safety
/// `report` is a live handle or null; `out` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn fedoap_report_mean_test_dice(report: *const FedoapReport, out: *mut f64) -> FedoapStatus {
    guard(|| {
        nonnull!(report, out);
        *out = (&*report).inner.mean_test_dice.mean;
        FedoapStatus::Ok
    })
}

/// # Safety
/// `report` is a live handle or null; `out` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn fedoap_report_client_count(report: *const FedoapReport, out: *mut usize) -> FedoapStatus {
    guard(|| {
        nonnull!(report, out);
        *out = (&*report).inner.per_client.len();
        FedoapStatus::Ok
    })
}

/// Test Dice of client `index`, averaged over seeds.
///
/// # Safety
/// `report` is a live handle or null; `out` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn fedoap_report_client_test_dice(
    report: *const FedoapReport,
    index: usize,
    out: *mut f64,
) -> FedoapStatus {
    guard(|| {
        nonnull!(report, out);
        match (&*report).inner.per_client.get(index) {
            Some(c) => {
                *out = c.test_dice.mean;
                FedoapStatus::Ok
            }
            None => fail(FedoapStatus::InvalidArgument, format!("no client {index}")),
        }
    })
}

/// The full report as compact JSON. `needed` receives the length without
/// the terminator; with a too-small `buf` nothing is copied and the status
/// is `BUFFER_TOO_SMALL`, so a first call with `len = 0` sizes the buffer.
///
/// # Safety
/// `report` is a live handle or null; `buf` is null or has `len` writable
/// bytes; `needed` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn fedoap_report_json(
    report: *const FedoapReport,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> FedoapStatus {
    guard(|| {
        nonnull!(report, needed);
        let json = &(&*report).json;
        *needed = json.len();
        if buf.is_null() || len <= json.len() {
            return fail(
                FedoapStatus::BufferTooSmall,
                format!("report needs {} bytes plus terminator", json.len()),
            );
        }
        ptr::copy_nonoverlapping(json.as_ptr(), buf.cast::<u8>(), json.len());
        *buf.add(json.len()) = 0;
        FedoapStatus::Ok
    })
}

/// # Safety
/// `report` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fedoap_report_free(report: *mut FedoapReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Closed-form bytes per client per round for the configured model,
/// strategy, client count and anchor size, plus the whole round's total.
///
/// # Safety
/// `config` is a live handle or null; the out pointers are null or writable.
#[no_mangle]
pub unsafe extern "C" fn fedoap_transmission_bytes(
    config: *const FedoapConfig,
    uplink: *mut u64,
    downlink: *mut u64,
    round_total: *mut u64,
) -> FedoapStatus {
    guard(|| {
        nonnull!(config, uplink, downlink, round_total);
        let c = &(&*config).inner;
        match transmission_bytes(&c.model(), &c.strategy(), c.clients, c.anchor_size) {
            Ok(t) => {
                *uplink = t.uplink_per_client;
                *downlink = t.downlink_per_client;
                *round_total = t.round_total;
                FedoapStatus::Ok
            }
            Err(e) => harness_status(e.into()),
        }
    })
}

/// Dice of two binary masks of `len` values each (0 or 1). Two empty masks
/// score 1.
///
/// # Safety
/// `pred` and `target` are null or point to `len` readable values; `out`
/// is null or writable.
#[no_mangle]
pub unsafe extern "C" fn fedoap_dice_score(
    pred: *const f64,
    target: *const f64,
    len: usize,
    out: *mut f64,
) -> FedoapStatus {
    guard(|| {
        nonnull!(pred, target, out);
        let as_tensor = |p: *const f64| Tensor::new(vec![len], std::slice::from_raw_parts(p, len).to_vec());
        let (a, b) = match (as_tensor(pred), as_tensor(target)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return fail(FedoapStatus::InvalidArgument, "masks must not be empty"),
        };
        match dice_score(&a, &b) {
            Ok(d) => {
                *out = d;
                FedoapStatus::Ok
            }
            Err(e) => fail(FedoapStatus::InvalidArgument, e.to_string()),
        }
    })
}
