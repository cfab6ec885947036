//! C interface to the summarization toolkit: open a trained summarizer from
//! artifact files, summarize documents, and score candidates with ROUGE.
//!
//! Every fallible call returns an [`XsfStatus`]; on failure a human-readable
//! message is recorded per thread and can be read with [`xsf_last_error`].
//! Strings returned through out-parameters are owned by the caller and must
//! be released with [`xsf_string_free`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use xsumforge::corpus::tokenize;
use xsumforge::evalsuite::rouge;
use xsumforge::inference::{BeamConfig, InferError, Summarizer};

/// Result of every fallible call in this interface.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XsfStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The artifacts could not be loaded or do not fit together.
    LoadFailed = 3,
    /// The input was rejected (empty document, empty reference).
    BadInput = 4,
    /// An unexpected internal failure; details via `xsf_last_error`.
    Internal = 5,
}

/// ROUGE-1/2/L precision, recall, and F1 for one candidate/reference pair.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct XsfRouge {
    pub r1_precision: f64,
    pub r1_recall: f64,
    pub r1_f1: f64,
    pub r2_precision: f64,
    pub r2_recall: f64,
    pub r2_f1: f64,
    pub rl_precision: f64,
    pub rl_recall: f64,
    pub rl_f1: f64,
}

/// Opaque handle to a loaded summarizer.
pub struct XsfSummarizer {
    inner: Summarizer,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn record_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: XsfStatus, message: &str) -> XsfStatus {
    record_error(message);
    status
}

/// Runs `body` converting panics into `Internal` so unwinding never crosses
/// the C boundary.
fn guarded(body: impl FnOnce() -> XsfStatus) -> XsfStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(XsfStatus::Internal, "internal panic"),
    }
}

/// Null-checked UTF-8 view of a C string argument.
///
/// # Safety
/// `ptr` must be null or point to a NUL-terminated string.
unsafe fn utf8_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, XsfStatus> {
    if ptr.is_null() {
        return Err(fail(XsfStatus::NullArgument, &format!("{name} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(XsfStatus::InvalidUtf8, &format!("{name} is not valid UTF-8")))
}

/// Message describing the most recent failure on the calling thread, as a
/// NUL-terminated string. The pointer stays valid until the next failing
/// call on the same thread. Never null; empty before any failure.
#[no_mangle]
pub extern "C" fn xsf_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Opens a summarizer from a model checkpoint, a vocabulary file, and an
/// optional topic model (pass null for variants that do not use one).
/// `beam` and `max_len` of 0 select the defaults (beam 10, full length).
/// On success writes a handle to `out`; release it with
/// [`xsf_summarizer_close`].
///
/// # Safety
/// `checkpoint` and `vocab` must be NUL-terminated strings, `topic_model`
/// null or NUL-terminated, and `out` a valid location to store the handle.
#[no_mangle]
pub unsafe extern "C" fn xsf_summarizer_open(
    checkpoint: *const c_char,
    vocab: *const c_char,
    topic_model: *const c_char,
    beam: u32,
    max_len: u32,
    out: *mut *mut XsfSummarizer,
) -> XsfStatus {
    guarded(|| {
        if out.is_null() {
            return fail(XsfStatus::NullArgument, "out is null");
        }
        let checkpoint = match utf8_arg(checkpoint, "checkpoint") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let vocab = match utf8_arg(vocab, "vocab") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let topic_model = if topic_model.is_null() {
            None
        } else {
            match utf8_arg(topic_model, "topic_model") {
                Ok(s) => Some(s),
                Err(status) => return status,
            }
        };
        let mut config = BeamConfig::default();
        if beam > 0 {
            config.beam = beam as usize;
        }
        if max_len > 0 {
            config.max_len = max_len as usize;
        }
        match Summarizer::from_files(
            Path::new(checkpoint),
            Path::new(vocab),
            topic_model.map(Path::new),
            config,
        ) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(XsfSummarizer { inner }));
                XsfStatus::Ok
            }
            Err(e) => fail(XsfStatus::LoadFailed, &e.to_string()),
        }
    })
}

/// Summarizes a UTF-8 document and writes a newly allocated NUL-terminated
/// summary to `out`. Free the summary with [`xsf_string_free`].
///
/// # Safety
/// `handle` must come from a successful [`xsf_summarizer_open`] and not yet
/// be closed, `document` must be a NUL-terminated string, and `out` a valid
/// location to store the result.
#[no_mangle]
pub unsafe extern "C" fn xsf_summarize(
    handle: *const XsfSummarizer,
    document: *const c_char,
    out: *mut *mut c_char,
) -> XsfStatus {
    guarded(|| {
        if handle.is_null() {
            return fail(XsfStatus::NullArgument, "handle is null");
        }
        if out.is_null() {
            return fail(XsfStatus::NullArgument, "out is null");
        }
        let document = match utf8_arg(document, "document") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match (*handle).inner.summarize(document) {
            Ok(summary) => match CString::new(summary) {
                Ok(c) => {
                    *out = c.into_raw();
                    XsfStatus::Ok
                }
                Err(_) => fail(XsfStatus::Internal, "summary contained a NUL byte"),
            },
            Err(InferError::EmptySource) => {
                fail(XsfStatus::BadInput, "document has no tokens")
            }
            Err(e) => fail(XsfStatus::Internal, &e.to_string()),
        }
    })
}

/// Scores `candidate` against `reference` with ROUGE-1/2/L after tokenizing
/// both. Fails with `BadInput` when the reference has no tokens.
///
/// # Safety
/// `candidate` and `reference` must be NUL-terminated strings and `out` a
/// valid location to store the scores.
#[no_mangle]
pub unsafe extern "C" fn xsf_rouge(
    candidate: *const c_char,
    reference: *const c_char,
    out: *mut XsfRouge,
) -> XsfStatus {
    guarded(|| {
        if out.is_null() {
            return fail(XsfStatus::NullArgument, "out is null");
        }
        let candidate = match utf8_arg(candidate, "candidate") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let reference = match utf8_arg(reference, "reference") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match rouge(&tokenize(candidate), &tokenize(reference)) {
            Ok(scores) => {
                *out = XsfRouge {
                    r1_precision: scores.r1.precision,
                    r1_recall: scores.r1.recall,
                    r1_f1: scores.r1.f1,
                    r2_precision: scores.r2.precision,
                    r2_recall: scores.r2.recall,
                    r2_f1: scores.r2.f1,
                    rl_precision: scores.rl.precision,
                    rl_recall: scores.rl.recall,
                    rl_f1: scores.rl.f1,
                };
                XsfStatus::Ok
            }
            Err(e) => fail(XsfStatus::BadInput, &e.to_string()),
        }
    })
}

/// Releases a summarizer handle. Null is ignored.
///
/// # Safety
/// `handle` must be null or come from [`xsf_summarizer_open`], and must not
/// be used after this call.
#[no_mangle]
pub unsafe extern "C" fn xsf_summarizer_close(handle: *mut XsfSummarizer) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Releases a string produced by this interface. Null is ignored.
///
/// # Safety
/// `s` must be null or a string returned through an out-parameter of this
/// interface, and must not be used after this call.
#[no_mangle]
pub unsafe extern "C" fn xsf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
