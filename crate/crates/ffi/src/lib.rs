//! C interface to the transformed-control harness.
//!
//! Every function returns a [`TcStatus`]. On failure the message is available
//! from [`tc_last_error`] on the same thread until the next failing call.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use transformed_control::bank::{Group, Level};
use transformed_control::estimator::{self, AdsEstimate, DeltaObservation, Role, SeKind};
use transformed_control::{judge, scale, QuestionBank};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotFound = 3,
    BankError = 4,
    ScaleError = 5,
    EstimatorError = 6,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcRole {
    Student = 0,
    Agent = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcMethod {
    /// Saturated OLS with homoskedastic standard errors.
    Ols = 0,
    /// Saturated OLS with HC1 standard errors.
    OlsHc1 = 1,
    MeanDiff = 2,
}

/// One year of an estimate. `has_se` is 0 when the method gives no standard
/// error, in which case `se`, `ci_lo` and `ci_hi` are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TcYearEstimate {
    pub year: u16,
    pub beta: f64,
    pub gamma: f64,
    pub has_se: i32,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_student: usize,
    pub n_agent: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TcConcordance {
    pub slope: f64,
    pub intercept: f64,
    pub max_abs_residual: f64,
    pub points: usize,
}

pub struct TcBank {
    inner: QuestionBank,
}

/// Accumulates baseline-differenced observations.
pub struct TcPanel {
    rows: Vec<DeltaObservation>,
}

pub struct TcEstimate {
    inner: AdsEstimate,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(TcStatus, String);

impl Fail {
    fn null(what: &str) -> Self {
        Fail(TcStatus::NullPointer, format!("{what} is null"))
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TcStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            TcStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(TcStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail::null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail::null(what))
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a question bank CSV.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tc_bank_load(path: *const c_char, out: *mut *mut TcBank) -> TcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let inner = transformed_control::load_question_bank(path).map_err(|e| Fail(TcStatus::BankError, e.to_string()))?;
        *out = Box::into_raw(Box::new(TcBank { inner }));
        Ok(())
    })
}

/// # Safety
/// `bank` must come from [`tc_bank_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tc_bank_free(bank: *mut TcBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Total number of questions in the bank.
///
/// # Safety
/// `bank` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tc_bank_len(bank: *const TcBank, out: *mut usize) -> TcStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(bank, "bank")?.inner.len();
        Ok(())
    })
}

/// Number of questions available for `year`.
///
/// # Safety
/// `bank` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tc_bank_year_len(bank: *const TcBank, year: u16, out: *mut usize) -> TcStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(bank, "bank")?.inner.questions(year).len();
        Ok(())
    })
}

/// Parses `response` as an answer to `question_id` and writes 1 to `correct`
/// if it is acceptable, else 0.
///
/// # Safety
/// `bank` must be a live handle, the strings NUL-terminated, `correct` valid.
#[no_mangle]
pub unsafe extern "C" fn tc_bank_grade(
    bank: *const TcBank,
    question_id: *const c_char,
    response: *const c_char,
    correct: *mut i32,
) -> TcStatus {
    guard(|| {
        let correct = out_arg(correct, "correct")?;
        let bank = handle(bank, "bank")?;
        let id = str_arg(question_id, "question_id")?;
        let response = str_arg(response, "response")?;
        let q = bank
            .inner
            .get(id)
            .ok_or_else(|| Fail(TcStatus::NotFound, format!("no question {id:?}")))?;
        let parsed = judge::parse_response(response, q.qtype);
        *correct = judge::grade(q, &parsed) as i32;
        Ok(())
    })
}

/// Fits the pre-to-post concordance line through `n` score pairs.
///
/// # Safety
/// `old_scaled` and `new_scaled` must each point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn tc_concordance_fit(
    old_scaled: *const f64,
    new_scaled: *const f64,
    n: usize,
    out: *mut TcConcordance,
) -> TcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if old_scaled.is_null() || new_scaled.is_null() {
            return Err(Fail::null("score array"));
        }
        let old = std::slice::from_raw_parts(old_scaled, n);
        let new = std::slice::from_raw_parts(new_scaled, n);
        let pairs: Vec<(f64, f64)> = old.iter().copied().zip(new.iter().copied()).collect();
        let c = scale::fit_concordance(&pairs).map_err(|e| Fail(TcStatus::ScaleError, e.to_string()))?;
        *out = TcConcordance {
            slope: c.slope,
            intercept: c.intercept,
            max_abs_residual: c.max_abs_residual,
            points: c.points,
        };
        Ok(())
    })
}

/// Maps a pre-era scaled score onto the post-era scale.
///
/// # Safety
/// `concordance` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn tc_concordance_map(
    concordance: *const TcConcordance,
    scaled_pre: f64,
    out: *mut f64,
) -> TcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let c = handle(concordance, "concordance")?;
        let lc = scale::LinearConcordance {
            slope: c.slope,
            intercept: c.intercept,
            max_abs_residual: c.max_abs_residual,
            points: c.points,
        };
        *out = lc
            .map_pre_to_post(scaled_pre)
            .map_err(|e| Fail(TcStatus::ScaleError, e.to_string()))?;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn tc_panel_new() -> *mut TcPanel {
    Box::into_raw(Box::new(TcPanel { rows: Vec::new() }))
}

/// # Safety
/// `panel` must come from [`tc_panel_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tc_panel_free(panel: *mut TcPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

/// Adds one observation: the change in `unit_id`'s score between the baseline
/// year and `year`.
///
/// # Safety
/// `panel` must be a live handle and `unit_id` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tc_panel_add(
    panel: *mut TcPanel,
    unit_id: *const c_char,
    role: TcRole,
    year: u16,
    delta: f64,
) -> TcStatus {
    guard(|| {
        let panel = out_arg(panel, "panel")?;
        let unit_id = str_arg(unit_id, "unit_id")?;
        if !delta.is_finite() {
            return Err(Fail(TcStatus::InvalidArgument, format!("delta {delta} is not finite")));
        }
        if !(transformed_control::FIRST_YEAR..=transformed_control::LAST_YEAR).contains(&year) {
            return Err(Fail(TcStatus::InvalidArgument, format!("year {year} out of range")));
        }
        panel.rows.push(DeltaObservation {
            unit_id: unit_id.to_string(),
            role: match role {
                TcRole::Student => Role::Student,
                TcRole::Agent => Role::Agent,
            },
            year,
            delta,
            level: Level::State,
            group: Group::All,
        });
        Ok(())
    })
}

/// Number of observations added so far.
///
/// # Safety
/// `panel` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tc_panel_len(panel: *const TcPanel, out: *mut usize) -> TcStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(panel, "panel")?.rows.len();
        Ok(())
    })
}

/// Estimates the per-year ADS from the panel.
///
/// # Safety
/// `panel` must be a live handle and `out` a valid pointer. The result must be
/// released with [`tc_estimate_free`].
#[no_mangle]
pub unsafe extern "C" fn tc_panel_estimate(
    panel: *const TcPanel,
    method: TcMethod,
    out: *mut *mut TcEstimate,
) -> TcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let rows = &handle(panel, "panel")?.rows;
        let inner = match method {
            TcMethod::Ols => estimator::ads_ols_with(rows, SeKind::Homoskedastic),
            TcMethod::OlsHc1 => estimator::ads_ols_with(rows, SeKind::Hc1),
            TcMethod::MeanDiff => estimator::ads_mean_diff(rows),
        }
        .map_err(|e| Fail(TcStatus::EstimatorError, e.to_string()))?;
        *out = Box::into_raw(Box::new(TcEstimate { inner }));
        Ok(())
    })
}

/// # Safety
/// `estimate` must come from [`tc_panel_estimate`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tc_estimate_free(estimate: *mut TcEstimate) {
    if !estimate.is_null() {
        drop(Box::from_raw(estimate));
    }
}

/// Number of estimated years.
///
/// # Safety
/// `estimate` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tc_estimate_len(estimate: *const TcEstimate, out: *mut usize) -> TcStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(estimate, "estimate")?.inner.years.len();
        Ok(())
    })
}

/// Copies year `index` (in ascending year order) into `out`.
///
/// # Safety
/// `estimate` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tc_estimate_year(
    estimate: *const TcEstimate,
    index: usize,
    out: *mut TcYearEstimate,
) -> TcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let years = &handle(estimate, "estimate")?.inner.years;
        let y = years.get(index).ok_or_else(|| {
            Fail(
                TcStatus::InvalidArgument,
                format!("index {index} out of range ({} years)", years.len()),
            )
        })?;
        *out = TcYearEstimate {
            year: y.year,
            beta: y.beta,
            gamma: y.gamma,
            has_se: y.se.is_some() as i32,
            se: y.se.unwrap_or(f64::NAN),
            ci_lo: y.ci_lo.unwrap_or(f64::NAN),
            ci_hi: y.ci_hi.unwrap_or(f64::NAN),
            n_student: y.n_student,
            n_agent: y.n_agent,
        };
        Ok(())
    })
}
