//! C ABI over the dialog-knn engine.
//!
//! Every fallible call returns a [`DkStatus`]; on failure the message is
//! available from [`dk_last_error`] on the same thread. Strings handed out by
//! this library must be released with [`dk_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dialog_knn::config::RunConfig;
use dialog_knn::corpus::{normalize, parse_prefixes};
use dialog_knn::eval::bleu;
use dialog_knn::pipeline::{complete, Artifacts};
use dialog_knn::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DkStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    NotFound = 3,
    Config = 4,
    Parse = 5,
    Validation = 6,
    Provenance = 7,
    Format = 8,
    Io = 9,
    Runtime = 10,
    Panic = 11,
}

/// Opaque handle: a loaded checkpoint, vocabulary and retrieval artifacts.
pub struct DkEngine {
    cfg: RunConfig,
    art: Artifacts,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    // Interior NULs would truncate the message; replace them.
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> DkStatus {
    match e {
        Error::Io { .. } => DkStatus::Io,
        Error::NotFound { .. } => DkStatus::NotFound,
        Error::Parse { .. } => DkStatus::Parse,
        Error::Validation(_) | Error::TokenOutOfRange { .. } | Error::DimMismatch { .. } | Error::Empty(_) => {
            DkStatus::Validation
        }
        Error::Config(_) => DkStatus::Config,
        Error::Format { .. } => DkStatus::Format,
        Error::Provenance(_) => DkStatus::Provenance,
        _ => DkStatus::Runtime,
    }
}

struct Fail(DkStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DkStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DkStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DkStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a NUL-terminated string valid for the call.
unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(DkStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DkStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn out_string(s: String, out: *mut *mut c_char) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| Fail(DkStatus::Runtime, "output contains NUL".into()))?;
    // SAFETY: caller checked `out` is non-null.
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Loads a run configuration file and the artifacts it points to.
/// `overrides` is null or newline-separated `key=value` lines applied on top.
///
/// # Safety
/// String arguments are null or NUL-terminated; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dk_engine_open(
    config_path: *const c_char,
    overrides: *const c_char,
    out: *mut *mut DkEngine,
) -> DkStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail(DkStatus::NullArgument, "out is null".into()));
        }
        *out = ptr::null_mut();
        let path = str_arg(config_path, "config_path")?;
        let mut cfg = RunConfig::load(Path::new(path))?;
        if !overrides.is_null() {
            cfg.apply_text(str_arg(overrides, "overrides")?)?;
        }
        cfg.validate()?;
        let art = Artifacts::load(&cfg)?;
        *out = Box::into_raw(Box::new(DkEngine { cfg, art }));
        Ok(())
    })
}

/// # Safety
/// `engine` is null or came from [`dk_engine_open`] and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dk_engine_free(engine: *mut DkEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Completes one prefix dialog, given as a single JSON object in corpus
/// format ending with a user turn. Writes the assistant text to `out`.
///
/// # Safety
/// `engine` came from [`dk_engine_open`]; `prefix_json` is NUL-terminated;
/// `out` is a valid pointer. Free the result with [`dk_string_free`].
#[no_mangle]
pub unsafe extern "C" fn dk_engine_generate(
    engine: *const DkEngine,
    prefix_json: *const c_char,
    out: *mut *mut c_char,
) -> DkStatus {
    guard(|| {
        if engine.is_null() || out.is_null() {
            return Err(Fail(DkStatus::NullArgument, "engine or out is null".into()));
        }
        *out = ptr::null_mut();
        let e = &*engine;
        let json = str_arg(prefix_json, "prefix_json")?;
        let mut dialogs = parse_prefixes(json.as_bytes())?;
        if dialogs.len() != 1 {
            return Err(Fail(
                DkStatus::Validation,
                format!("expected one prefix dialog, got {}", dialogs.len()),
            ));
        }
        let d = dialogs.remove(0);
        let retriever = e.art.retriever(e.cfg.generation.index_mode)?;
        let (c, _) = complete(&e.cfg, &e.art, &retriever, &d)?;
        out_string(c.completion, out)
    })
}

/// # Safety
/// `engine` came from [`dk_engine_open`]; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dk_engine_vocab_size(engine: *const DkEngine, out: *mut usize) -> DkStatus {
    guard(|| {
        if engine.is_null() || out.is_null() {
            return Err(Fail(DkStatus::NullArgument, "engine or out is null".into()));
        }
        *out = (*engine).art.vocab.len();
        Ok(())
    })
}

/// Corpus BLEU (0..100) of `n` hypothesis/reference sentence pairs.
///
/// # Safety
/// `hypotheses` and `references` point to `n` NUL-terminated strings each;
/// `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dk_bleu(
    hypotheses: *const *const c_char,
    references: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> DkStatus {
    guard(|| {
        if hypotheses.is_null() || references.is_null() || out.is_null() {
            return Err(Fail(DkStatus::NullArgument, "null array or out".into()));
        }
        let read = |arr: *const *const c_char, name: &str| -> Result<Vec<Vec<String>>, Fail> {
            (0..n).map(|i| str_arg(*arr.add(i), name).map(normalize)).collect()
        };
        let h = read(hypotheses, "hypothesis")?;
        let r = read(references, "reference")?;
        *out = bleu(&h, &r)?.bleu;
        Ok(())
    })
}

/// # Safety
/// `s` is null or a string returned by this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn dk_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dk_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}
