//! C ABI over opdeob: parse a program, load saved models, strip opaque
//! predicates and read back the result.
//!
//! Every fallible call returns an [`OpdeobStatus`]; on failure the message is
//! available from [`opdeob_last_error`] on the same thread. Handles are
//! opaque and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use opdeob::deobf::{run_pipeline, Action, DeobfReport, Mode, ModelDetector, OracleConfig, PipelineConfig};
use opdeob::learn::{Task, TrainedModel};
use opdeob::mir::{emit_asm, parse_asm};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpdeobStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    /// A model was loaded for the wrong task or is malformed.
    BadModel = 4,
    Analysis = 5,
    Panic = 6,
}

/// A parsed program.
pub struct OpdeobProgram(opdeob::mir::Program);

/// A saved decision-tree model.
pub struct OpdeobModel(TrainedModel);

/// Per-predicate outcome of one deobfuscation run.
pub struct OpdeobReport(DeobfReport);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpdeobStats {
    pub predicates: u64,
    pub removed: u64,
    /// Predicted opaque but seen going the other way on random runs.
    pub guarded: u64,
    /// Stripped, then restored after an equivalence failure.
    pub reverted: u64,
    pub errors: u64,
    /// 1 when the output matched the input on every check run.
    pub equivalent: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: OpdeobStatus, msg: &str) -> OpdeobStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> OpdeobStatus) -> OpdeobStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(OpdeobStatus::Panic, "internal panic"),
    }
}

/// # Safety
/// `s` must be null or a NUL-terminated string.
unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, OpdeobStatus> {
    if s.is_null() {
        return Err(fail(OpdeobStatus::NullArgument, "null string argument"));
    }
    CStr::from_ptr(s).to_str().map_err(|_| fail(OpdeobStatus::InvalidUtf8, "string is not UTF-8"))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn opdeob_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parses assembly text into a new program handle.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn opdeob_program_parse(text: *const c_char, out: *mut *mut OpdeobProgram) -> OpdeobStatus {
    guard(|| {
        if out.is_null() {
            return fail(OpdeobStatus::NullArgument, "null output pointer");
        }
        let text = match read_str(text) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match parse_asm(text) {
            Ok(p) => {
                *out = Box::into_raw(Box::new(OpdeobProgram(p)));
                OpdeobStatus::Ok
            }
            Err(e) => fail(OpdeobStatus::Parse, &e.to_string()),
        }
    })
}

/// # Safety
/// `p` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn opdeob_program_free(p: *mut OpdeobProgram) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Renders the program as assembly text; free with [`opdeob_string_free`].
///
/// # Safety
/// `p` must be a live program handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn opdeob_program_to_asm(p: *const OpdeobProgram, out: *mut *mut c_char) -> OpdeobStatus {
    guard(|| {
        if p.is_null() || out.is_null() {
            return fail(OpdeobStatus::NullArgument, "null argument");
        }
        *out = into_c_string(emit_asm(&(*p).0));
        OpdeobStatus::Ok
    })
}

/// # Safety
/// `s` must be null or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn opdeob_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a saved model (the text written by `opdeob train`).
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn opdeob_model_load(text: *const c_char, out: *mut *mut OpdeobModel) -> OpdeobStatus {
    guard(|| {
        if out.is_null() {
            return fail(OpdeobStatus::NullArgument, "null output pointer");
        }
        let text = match read_str(text) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match TrainedModel::from_text(text) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(OpdeobModel(m)));
                OpdeobStatus::Ok
            }
            Err(e) => fail(OpdeobStatus::BadModel, &e.to_string()),
        }
    })
}

/// # Safety
/// `m` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn opdeob_model_free(m: *mut OpdeobModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Strips the opaque predicates of `p`. With both models null the
/// brute-force oracle decides; otherwise `detector` must be a detection
/// model and `resolver` a deobfuscation model. On success `*out` receives the
/// rewritten program and, when `report` is non-null, `*report` the run report.
///
/// # Safety
/// `p` must be a live program handle, each model null or live, `out` valid,
/// and `report` null or valid.
#[no_mangle]
pub unsafe extern "C" fn opdeob_deobfuscate(
    p: *const OpdeobProgram,
    detector: *const OpdeobModel,
    resolver: *const OpdeobModel,
    seed: u64,
    out: *mut *mut OpdeobProgram,
    report: *mut *mut OpdeobReport,
) -> OpdeobStatus {
    guard(|| {
        if p.is_null() || out.is_null() {
            return fail(OpdeobStatus::NullArgument, "null argument");
        }
        let cfg = PipelineConfig { seed, ..PipelineConfig::default() };
        let (q, r) = match (detector.is_null(), resolver.is_null()) {
            (true, true) => {
                let mode = Mode::Oracle(OracleConfig { seed, ..OracleConfig::default() });
                run_pipeline(&(*p).0, &mode, None, &cfg)
            }
            (false, false) => {
                let (d, r) = (&(*detector).0, &(*resolver).0);
                if d.task != Task::Detection || r.task != Task::Deobfuscation {
                    return fail(OpdeobStatus::BadModel, "expected a detection model and a deobfuscation model");
                }
                let det = ModelDetector { detector: d, deobfuscator: r };
                run_pipeline(&(*p).0, &Mode::Model(&det), None, &cfg)
            }
            _ => return fail(OpdeobStatus::NullArgument, "pass both models or neither"),
        };
        if !r.equivalent {
            return fail(OpdeobStatus::Analysis, "output failed the equivalence check");
        }
        *out = Box::into_raw(Box::new(OpdeobProgram(q)));
        if !report.is_null() {
            *report = Box::into_raw(Box::new(OpdeobReport(r)));
        }
        OpdeobStatus::Ok
    })
}

/// # Safety
/// `r` must be a live report handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn opdeob_report_stats(r: *const OpdeobReport, out: *mut OpdeobStats) -> OpdeobStatus {
    guard(|| {
        if r.is_null() || out.is_null() {
            return fail(OpdeobStatus::NullArgument, "null argument");
        }
        let rep = &(*r).0;
        let count = |f: fn(&Action) -> bool| rep.rows.iter().filter(|x| f(&x.action)).count() as u64;
        *out = OpdeobStats {
            predicates: rep.rows.len() as u64,
            removed: count(|a| *a == Action::Removed),
            guarded: count(|a| *a == Action::Guarded),
            reverted: count(|a| *a == Action::Reverted),
            errors: count(|a| matches!(a, Action::Failed(_))),
            equivalent: rep.equivalent as u8,
        };
        OpdeobStatus::Ok
    })
}

/// `predicate,truth,predicted,action` table; free with [`opdeob_string_free`].
///
/// # Safety
/// `r` must be a live report handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn opdeob_report_csv(r: *const OpdeobReport, out: *mut *mut c_char) -> OpdeobStatus {
    guard(|| {
        if r.is_null() || out.is_null() {
            return fail(OpdeobStatus::NullArgument, "null argument");
        }
        *out = into_c_string((*r).0.rows_csv());
        OpdeobStatus::Ok
    })
}

/// # Safety
/// `r` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn opdeob_report_free(r: *mut OpdeobReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}
