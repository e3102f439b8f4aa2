//! C interface to the n-gram scorer, window scoring, relative redirection
//! and the rank tests.
//!
//! Every fallible function returns a [`CrStatus`] and writes its result
//! through an out-pointer. On failure a message is kept per thread and can
//! be read with [`cr_last_error_message`]. Models are opaque handles owned
//! by the caller once returned and released with [`cr_ngram_free`].
//! Strings are NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use convo_redirect::aggregate::relative_redirection;
use convo_redirect::measures::{redirection_score, AdjacencyWindow};
use convo_redirect::pipeline::{load_input, SegmentationParams};
use convo_redirect::scorer::{train_ngram, NGramConfig, NGramModel};
use convo_redirect::segmentation::segment_corpus;
use convo_redirect::stats::{mann_whitney_u, wilcoxon_signed_rank, Alternative, Method, TestResult};
use convo_redirect::{Role, Utterance};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Model = 5,
    Stats = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrRole {
    A = 0,
    B = 1,
}

impl From<CrRole> for Role {
    fn from(r: CrRole) -> Self {
        match r {
            CrRole::A => Role::A,
            CrRole::B => Role::B,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrAlternative {
    TwoSided = 0,
    Greater = 1,
    Less = 2,
}

impl From<CrAlternative> for Alternative {
    fn from(a: CrAlternative) -> Self {
        match a {
            CrAlternative::TwoSided => Alternative::TwoSided,
            CrAlternative::Greater => Alternative::Greater,
            CrAlternative::Less => Alternative::Less,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CrTestResult {
    pub statistic: f64,
    pub p_value: f64,
    /// 1 when the p-value comes from the exact null distribution.
    pub exact: u8,
    pub n: usize,
}

impl From<TestResult> for CrTestResult {
    fn from(t: TestResult) -> Self {
        CrTestResult {
            statistic: t.statistic,
            p_value: t.p_value,
            exact: u8::from(t.method == Method::Exact),
            n: t.n,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CrWindowScore {
    /// Reply likelihood given the focal utterance.
    pub p: f64,
    /// Reply likelihood given the earlier utterance it would otherwise follow.
    pub q: f64,
    pub redirection: f64,
}

/// Opaque n-gram model.
pub struct CrNgramModel {
    inner: NGramModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

type FfiResult<T> = Result<T, (CrStatus, String)>;

fn guard<F: FnOnce() -> FfiResult<()>>(f: F) -> CrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CrStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CrStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err((CrStatus::NullPointer, format!("{name} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (CrStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> FfiResult<&'a [f64]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err((CrStatus::NullPointer, format!("{name} is NULL")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn out_arg<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    // SAFETY: caller guarantees a non-NULL `p` points to writable storage.
    unsafe { p.as_mut() }.ok_or((CrStatus::NullPointer, format!("{name} is NULL")))
}

fn model_arg<'a>(p: *const CrNgramModel) -> FfiResult<&'a NGramModel> {
    // SAFETY: non-NULL handles come from this library and are still live.
    unsafe { p.as_ref() }
        .map(|m| &m.inner)
        .ok_or((CrStatus::NullPointer, "model is NULL".into()))
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn cr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn cr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model written by `cr_ngram_save` or the `train-lm` command.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cr_ngram_load(path: *const c_char, out: *mut *mut CrNgramModel) -> CrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let inner = NGramModel::load(Path::new(path)).map_err(|e| (CrStatus::Io, e.to_string()))?;
        *out = Box::into_raw(Box::new(CrNgramModel { inner }));
        Ok(())
    })
}

/// Trains a model on every session of a corpus. `mapping` may be NULL for
/// corpora already in the canonical field layout.
///
/// # Safety
/// String arguments must be NUL-terminated or NULL where allowed; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn cr_ngram_train(
    corpus: *const c_char,
    mapping: *const c_char,
    order: usize,
    discount: f64,
    out: *mut *mut CrNgramModel,
) -> CrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let corpus = str_arg(corpus, "corpus")?;
        let mapping = if mapping.is_null() { None } else { Some(str_arg(mapping, "mapping")?) };
        let c = load_input(Path::new(corpus), mapping.map(Path::new)).map_err(|e| (CrStatus::Io, e.to_string()))?;
        let seg = SegmentationParams::default()
            .build()
            .map_err(|e| (CrStatus::InvalidArgument, e.to_string()))?;
        let sessions = segment_corpus(&c, &seg).map_err(|e| (CrStatus::InvalidArgument, e.to_string()))?;
        let cfg = NGramConfig {
            order,
            discount,
            ..NGramConfig::default()
        };
        let inner = train_ngram(sessions.iter().flat_map(|s| &s.sessions), &cfg)
            .map_err(|e| (CrStatus::Model, e.to_string()))?;
        *out = Box::into_raw(Box::new(CrNgramModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cr_ngram_save(model: *const CrNgramModel, path: *const c_char) -> CrStatus {
    guard(|| {
        let m = model_arg(model)?;
        let path = str_arg(path, "path")?;
        m.save(Path::new(path)).map_err(|e| (CrStatus::Io, e.to_string()))
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cr_ngram_free(model: *mut CrNgramModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size including reserved symbols.
///
/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cr_ngram_vocab_size(model: *const CrNgramModel, out: *mut usize) -> CrStatus {
    guard(|| {
        *out_arg(out, "out")? = model_arg(model)?.vocabulary().len();
        Ok(())
    })
}

/// Redirection of `focal` over the window
/// `(prev_other, prev_self, focal, reply)`. `focal_role` is the speaker
/// of `focal` and `prev_other`; the other two belong to the other role.
///
/// # Safety
/// `model` must be a live handle, strings NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cr_score_window(
    model: *const CrNgramModel,
    prev_other: *const c_char,
    prev_self: *const c_char,
    focal: *const c_char,
    reply: *const c_char,
    focal_role: CrRole,
    out: *mut CrWindowScore,
) -> CrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = model_arg(model)?;
        let fr: Role = focal_role.into();
        let rr = fr.other();
        let mk = |id: &str, role: Role, text: &str| Utterance::new(id, "ffi", role, 0, text);
        let po = mk("prev_other", fr, str_arg(prev_other, "prev_other")?);
        let ps = mk("prev_self", rr, str_arg(prev_self, "prev_self")?);
        let f = mk("focal", fr, str_arg(focal, "focal")?);
        let r = mk("reply", rr, str_arg(reply, "reply")?);
        let w = AdjacencyWindow::new(&po, &ps, &f, &r).map_err(|e| (CrStatus::InvalidArgument, e.to_string()))?;
        let s = redirection_score(&w, m).map_err(|e| (CrStatus::Model, e.to_string()))?;
        *out = CrWindowScore {
            p: s.p_likelihood,
            q: s.q_likelihood,
            redirection: s.redirection,
        };
        Ok(())
    })
}

/// Softmax of the two role averages.
///
/// # Safety
/// `out_t` and `out_c` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cr_relative_redirection(t_avg: f64, c_avg: f64, out_t: *mut f64, out_c: *mut f64) -> CrStatus {
    guard(|| {
        if !(t_avg.is_finite() && c_avg.is_finite()) {
            return Err((CrStatus::InvalidArgument, "averages must be finite".into()));
        }
        let (t, c) = relative_redirection(t_avg, c_avg);
        *out_arg(out_t, "out_t")? = t;
        *out_arg(out_c, "out_c")? = c;
        Ok(())
    })
}

/// Paired signed-rank test on `x[i] - y[i]`.
///
/// # Safety
/// `x` and `y` must point to `n` doubles each; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cr_wilcoxon(
    x: *const f64,
    y: *const f64,
    n: usize,
    alternative: CrAlternative,
    out: *mut CrTestResult,
) -> CrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let x = slice_arg(x, n, "x")?;
        let y = slice_arg(y, n, "y")?;
        let pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
        let r = wilcoxon_signed_rank(&pairs, alternative.into()).map_err(|e| (CrStatus::Stats, e.to_string()))?;
        *out = r.into();
        Ok(())
    })
}

/// Rank-sum test of `x` against `y`.
///
/// # Safety
/// `x` must point to `nx` doubles and `y` to `ny`; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cr_mann_whitney(
    x: *const f64,
    nx: usize,
    y: *const f64,
    ny: usize,
    alternative: CrAlternative,
    out: *mut CrTestResult,
) -> CrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let x = slice_arg(x, nx, "x")?;
        let y = slice_arg(y, ny, "y")?;
        let r = mann_whitney_u(x, y, alternative.into()).map_err(|e| (CrStatus::Stats, e.to_string()))?;
        *out = r.into();
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let p = cr_last_error_message();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }

    #[test]
    fn version_is_crate_version() {
        let v = unsafe { CStr::from_ptr(cr_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn relative_redirection_and_null_outputs() {
        let (mut t, mut c) = (0.0, 0.0);
        assert_eq!(unsafe { cr_relative_redirection(1.0, 0.0, &mut t, &mut c) }, CrStatus::Ok);
        assert!((t - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(cr_last_error_message().is_null());
        assert_eq!(
            unsafe { cr_relative_redirection(1.0, 0.0, ptr::null_mut(), &mut c) },
            CrStatus::NullPointer
        );
        assert!(last_error().contains("out_t"));
        assert_eq!(
            unsafe { cr_relative_redirection(f64::NAN, 0.0, &mut t, &mut c) },
            CrStatus::InvalidArgument
        );
    }

    #[test]
    fn worked_test_examples() {
        let x = [1.0, 2.0, 3.0];
        let y = [0.0, 0.0, 0.0];
        let mut r = CrTestResult::default();
        assert_eq!(unsafe { cr_wilcoxon(x.as_ptr(), y.as_ptr(), 3, CrAlternative::Greater, &mut r) }, CrStatus::Ok);
        assert_eq!(r.p_value, 0.125);
        assert_eq!(r.exact, 1);
        let (a, b) = ([1.0, 2.0], [3.0, 4.0]);
        assert_eq!(unsafe { cr_mann_whitney(a.as_ptr(), 2, b.as_ptr(), 2, CrAlternative::TwoSided, &mut r) }, CrStatus::Ok);
        assert!((r.p_value - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(
            unsafe { cr_wilcoxon(y.as_ptr(), y.as_ptr(), 3, CrAlternative::TwoSided, &mut r) },
            CrStatus::Stats
        );
    }

    #[test]
    fn bad_strings_are_reported() {
        let mut out = ptr::null_mut();
        assert_eq!(unsafe { cr_ngram_load(ptr::null(), &mut out) }, CrStatus::NullPointer);
        let bad = [0xffu8, 0];
        assert_eq!(unsafe { cr_ngram_load(bad.as_ptr().cast(), &mut out) }, CrStatus::InvalidUtf8);
        let missing = CString::new("/nonexistent/model.bin").unwrap();
        assert_eq!(unsafe { cr_ngram_load(missing.as_ptr(), &mut out) }, CrStatus::Io);
        assert!(out.is_null());
        unsafe { cr_ngram_free(ptr::null_mut()) };
    }
}
