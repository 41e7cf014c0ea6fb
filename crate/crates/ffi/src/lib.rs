//! C ABI over the momineq core.
//!
//! Every fallible function returns a [`MomineqStatus`]. On failure a
//! description is stored per thread and can be fetched with
//! [`momineq_last_error_message`]. Matrices are passed row-major.
//! Handles are opaque and must be released with their `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use momineq::polyhedra::{eliminate_nuisance, EliminationResult};
use momineq::qp::{solve_projection, QpProblem, QpSolution};
use momineq::rcc::rcc_decide;
use momineq::stats::{chi2_cdf, chi2_quantile, std_normal_cdf, SpdMatrix};
use momineq::Error;
use nalgebra::{DMatrix, DVector};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MomineqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NotPositiveDefinite = 4,
    Infeasible = 5,
    NoConvergence = 6,
    NotSolved = 7,
    BufferTooSmall = 8,
    Internal = 9,
    Panic = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> MomineqStatus {
    match err {
        Error::NotPositiveDefinite { .. } | Error::NotSymmetric { .. } => {
            MomineqStatus::NotPositiveDefinite
        }
        Error::ShapeMismatch { .. } | Error::RaggedRows { .. } => MomineqStatus::ShapeMismatch,
        Error::Infeasible => MomineqStatus::Infeasible,
        Error::MaxIterations(_) | Error::NoConvergence { .. } | Error::LineSearchFailure { .. } => {
            MomineqStatus::NoConvergence
        }
        Error::InvalidAlpha(_)
        | Error::InvalidProbability(_)
        | Error::DimensionTooLarge { .. }
        | Error::ConfigInvalid { .. }
        | Error::AnchorNotActive(_)
        | Error::ZeroAnchorRow(_) => MomineqStatus::InvalidArgument,
        _ => MomineqStatus::Internal,
    }
}

fn fail(status: MomineqStatus, msg: impl Into<String>) -> MomineqStatus {
    set_error(msg);
    status
}

/// Runs `f`, translating errors and panics into status codes.
fn guard<F>(f: F) -> MomineqStatus
where
    F: FnOnce() -> Result<(), MomineqStatus>,
{
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MomineqStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(MomineqStatus::Panic, "panic inside momineq"),
    }
}

fn from_core(err: Error) -> MomineqStatus {
    fail(status_of(&err), err.to_string())
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], MomineqStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(MomineqStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn matrix(
    p: *const f64,
    rows: usize,
    cols: usize,
    what: &str,
) -> Result<DMatrix<f64>, MomineqStatus> {
    let len = rows.checked_mul(cols).ok_or_else(|| {
        fail(
            MomineqStatus::InvalidArgument,
            format!("{what}: size overflow"),
        )
    })?;
    let s = slice(p, len, what)?;
    Ok(DMatrix::from_row_slice(rows, cols, s))
}

fn finite(values: &[f64], what: &str) -> Result<(), MomineqStatus> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(fail(
            MomineqStatus::InvalidArgument,
            format!("{what} holds a non-finite value"),
        ))
    }
}

unsafe fn copy_out(
    src: &[f64],
    out: *mut f64,
    len: usize,
    what: &str,
) -> Result<(), MomineqStatus> {
    if len < src.len() {
        return Err(fail(
            MomineqStatus::BufferTooSmall,
            format!("{what}: buffer holds {len}, need {}", src.len()),
        ));
    }
    if src.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(fail(
            MomineqStatus::NullPointer,
            format!("{what} buffer is null"),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn momineq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated
/// and NUL-terminated). Returns the full message length excluding the
/// terminator, or 0 when there is no error.
#[no_mangle]
pub unsafe extern "C" fn momineq_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            0
        }
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Standard normal distribution function.
#[no_mangle]
pub extern "C" fn momineq_std_normal_cdf(x: f64) -> f64 {
    std_normal_cdf(x)
}

/// Chi-squared distribution function; NaN for `df == 0`.
#[no_mangle]
pub extern "C" fn momineq_chi2_cdf(df: usize, q: f64) -> f64 {
    if df == 0 {
        return f64::NAN;
    }
    chi2_cdf(df, q)
}

/// Chi-squared quantile at probability `p` in (0, 1).
#[no_mangle]
pub unsafe extern "C" fn momineq_chi2_quantile(df: usize, p: f64, out: *mut f64) -> MomineqStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(MomineqStatus::NullPointer, "out is null"));
        }
        if df == 0 {
            return Err(fail(
                MomineqStatus::InvalidArgument,
                "df must be at least 1",
            ));
        }
        *out = chi2_quantile(df, p).map_err(from_core)?;
        Ok(())
    })
}

/// Projection problem `min n (pbar - k)' S^{-1} (pbar - k)` s.t. `A k <= rho`,
/// with the most recent solution.
pub struct MomineqQp {
    problem: QpProblem,
    solution: Option<QpSolution>,
}

/// Outcome of the refined chi-squared decision.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MomineqRccResult {
    pub statistic: f64,
    pub r_hat: usize,
    /// Standardised slack; NaN unless `r_hat == 1`.
    pub z: f64,
    /// Nonzero when `z` is infinite.
    pub z_infinite: i32,
    pub beta: f64,
    pub critical: f64,
    /// Nonzero when the null is rejected.
    pub reject: i32,
}

/// Creates a problem of dimension `dim` with `rows` constraints.
/// `sigma` is `dim x dim`, `a` is `rows x dim`.
#[no_mangle]
pub unsafe extern "C" fn momineq_qp_new(
    dim: usize,
    rows: usize,
    pbar: *const f64,
    sigma: *const f64,
    a: *const f64,
    rho: *const f64,
    n: usize,
    out: *mut *mut MomineqQp,
) -> MomineqStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(MomineqStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        if dim == 0 {
            return Err(fail(
                MomineqStatus::InvalidArgument,
                "dim must be at least 1",
            ));
        }
        let pbar = DVector::from_column_slice(slice(pbar, dim, "pbar")?);
        let sigma = matrix(sigma, dim, dim, "sigma")?;
        let a = matrix(a, rows, dim, "a")?;
        let rho = DVector::from_column_slice(slice(rho, rows, "rho")?);
        finite(pbar.as_slice(), "pbar")?;
        finite(sigma.as_slice(), "sigma")?;
        finite(a.as_slice(), "a")?;
        finite(rho.as_slice(), "rho")?;
        let sigma = SpdMatrix::new(sigma).map_err(from_core)?;
        let problem = QpProblem::new(pbar, sigma, a, rho, n).map_err(from_core)?;
        *out = Box::into_raw(Box::new(MomineqQp {
            problem,
            solution: None,
        }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn momineq_qp_free(qp: *mut MomineqQp) {
    if !qp.is_null() {
        drop(Box::from_raw(qp));
    }
}

/// Solves the projection and stores the solution in the handle.
/// `statistic` may be null.
#[no_mangle]
pub unsafe extern "C" fn momineq_qp_solve(
    qp: *mut MomineqQp,
    statistic: *mut f64,
) -> MomineqStatus {
    guard(|| {
        let h = qp
            .as_mut()
            .ok_or_else(|| fail(MomineqStatus::NullPointer, "qp is null"))?;
        let sol = solve_projection(&h.problem).map_err(from_core)?;
        if !statistic.is_null() {
            *statistic = sol.statistic;
        }
        h.solution = Some(sol);
        Ok(())
    })
}

fn solved<'a>(qp: *const MomineqQp) -> Result<(&'a MomineqQp, &'a QpSolution), MomineqStatus> {
    // SAFETY: callers pass a live handle; the borrow ends before the handle can be freed.
    let h = unsafe { qp.as_ref() }.ok_or_else(|| fail(MomineqStatus::NullPointer, "qp is null"))?;
    let sol = h
        .solution
        .as_ref()
        .ok_or_else(|| fail(MomineqStatus::NotSolved, "call momineq_qp_solve first"))?;
    Ok((h, sol))
}

/// Copies the minimizer (length `dim`) into `out`.
#[no_mangle]
pub unsafe extern "C" fn momineq_qp_kappa(
    qp: *const MomineqQp,
    out: *mut f64,
    len: usize,
) -> MomineqStatus {
    guard(|| {
        let (_, sol) = solved(qp)?;
        copy_out(sol.kappa_hat.as_slice(), out, len, "kappa")
    })
}

/// Copies the Lagrange multipliers (length `rows`) into `out`.
#[no_mangle]
pub unsafe extern "C" fn momineq_qp_multipliers(
    qp: *const MomineqQp,
    out: *mut f64,
    len: usize,
) -> MomineqStatus {
    guard(|| {
        let (_, sol) = solved(qp)?;
        copy_out(sol.multipliers.as_slice(), out, len, "multipliers")
    })
}

/// Number of active rows in the stored solution; 0 when unsolved or null.
#[no_mangle]
pub unsafe extern "C" fn momineq_qp_active_count(qp: *const MomineqQp) -> usize {
    qp.as_ref()
        .and_then(|h| h.solution.as_ref())
        .map_or(0, |s| s.active_rows.len())
}

/// Copies the active row indices (ascending) into `out`.
#[no_mangle]
pub unsafe extern "C" fn momineq_qp_active_rows(
    qp: *const MomineqQp,
    out: *mut usize,
    len: usize,
) -> MomineqStatus {
    guard(|| {
        let (_, sol) = solved(qp)?;
        let rows = &sol.active_rows;
        if len < rows.len() {
            return Err(fail(
                MomineqStatus::BufferTooSmall,
                format!("active rows: buffer holds {len}, need {}", rows.len()),
            ));
        }
        if !rows.is_empty() {
            if out.is_null() {
                return Err(fail(
                    MomineqStatus::NullPointer,
                    "active rows buffer is null",
                ));
            }
            ptr::copy_nonoverlapping(rows.as_ptr(), out, rows.len());
        }
        Ok(())
    })
}

/// Runs the refined chi-squared decision at level `alpha` in (0, 1/2],
/// solving first when needed.
#[no_mangle]
pub unsafe extern "C" fn momineq_qp_rcc(
    qp: *mut MomineqQp,
    alpha: f64,
    out: *mut MomineqRccResult,
) -> MomineqStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(MomineqStatus::NullPointer, "out is null"));
        }
        let h = qp
            .as_mut()
            .ok_or_else(|| fail(MomineqStatus::NullPointer, "qp is null"))?;
        if h.solution.is_none() {
            h.solution = Some(solve_projection(&h.problem).map_err(from_core)?);
        }
        let sol = h.solution.as_ref().expect("solved above");
        let p = &h.problem;
        let r = rcc_decide(sol, &p.a, &p.rho, &p.sigma, p.n, alpha).map_err(from_core)?;
        *out = MomineqRccResult {
            statistic: r.statistic,
            r_hat: r.r_hat,
            z: if r.z_infinite {
                f64::INFINITY
            } else {
                r.z.unwrap_or(f64::NAN)
            },
            z_infinite: i32::from(r.z_infinite),
            beta: r.beta,
            critical: r.critical,
            reject: i32::from(r.reject),
        };
        Ok(())
    })
}

/// Result of eliminating the nuisance block from `B mu + C delta >= d`.
pub struct MomineqElimination {
    result: EliminationResult,
}

/// Eliminates `delta`: `b` is `k x dm`, `c` is `k x dn`, `d` has length `k`.
#[no_mangle]
pub unsafe extern "C" fn momineq_eliminate(
    k: usize,
    dm: usize,
    dn: usize,
    b: *const f64,
    c: *const f64,
    d: *const f64,
    out: *mut *mut MomineqElimination,
) -> MomineqStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(MomineqStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        if k == 0 || dm == 0 || dn == 0 {
            return Err(fail(
                MomineqStatus::InvalidArgument,
                "k, dm and dn must be positive",
            ));
        }
        let b = matrix(b, k, dm, "b")?;
        let c = matrix(c, k, dn, "c")?;
        let d = DVector::from_column_slice(slice(d, k, "d")?);
        finite(b.as_slice(), "b")?;
        finite(c.as_slice(), "c")?;
        finite(d.as_slice(), "d")?;
        let result = eliminate_nuisance(&b, &c, &d).map_err(from_core)?;
        *out = Box::into_raw(Box::new(MomineqElimination { result }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn momineq_elimination_free(e: *mut MomineqElimination) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Number of vertices `m` (rows of `A`, `b` and `H`); 0 for null.
#[no_mangle]
pub unsafe extern "C" fn momineq_elimination_rows(e: *const MomineqElimination) -> usize {
    e.as_ref().map_or(0, |e| e.result.h.nrows())
}

fn elimination<'a>(e: *const MomineqElimination) -> Result<&'a EliminationResult, MomineqStatus> {
    // SAFETY: callers pass a live handle.
    unsafe { e.as_ref() }
        .map(|e| &e.result)
        .ok_or_else(|| fail(MomineqStatus::NullPointer, "elimination is null"))
}

/// Copies `A` (`m x dm`, row-major) into `out`.
#[no_mangle]
pub unsafe extern "C" fn momineq_elimination_a(
    e: *const MomineqElimination,
    out: *mut f64,
    len: usize,
) -> MomineqStatus {
    guard(|| copy_out(&row_major(&elimination(e)?.a), out, len, "A"))
}

/// Copies `b` (length `m`) into `out`.
#[no_mangle]
pub unsafe extern "C" fn momineq_elimination_b(
    e: *const MomineqElimination,
    out: *mut f64,
    len: usize,
) -> MomineqStatus {
    guard(|| copy_out(elimination(e)?.b.as_slice(), out, len, "b"))
}

/// Copies the vertex matrix `H` (`m x k`, row-major) into `out`.
#[no_mangle]
pub unsafe extern "C" fn momineq_elimination_h(
    e: *const MomineqElimination,
    out: *mut f64,
    len: usize,
) -> MomineqStatus {
    guard(|| copy_out(&row_major(&elimination(e)?.h), out, len, "H"))
}
