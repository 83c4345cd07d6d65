//! C ABI for the `odefilter` solvers.
//!
//! Objects are opaque handles created and released through this interface.
//! Every function returns an `OdfStatus`; on failure a message describing the
//! most recent error on the calling thread is available from `odf_last_error`.
//! Panics never cross the boundary: they are caught and reported as
//! `ODF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DMatrix, DVector};
use odefilter::control::ControllerConfig;
use odefilter::gaussian::marginal_solution;
use odefilter::{get_problem_variant, DiffusionModel, Error, IvProblem, OdePosterior, SolverSpec};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownProblem = 3,
    /// The solve started but did not reach the end of the time span.
    SolverFailure = 4,
    OutOfRange = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdfAlgorithm {
    Ekf0 = 0,
    Ekf1 = 1,
    Eks0 = 2,
    Eks1 = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdfDiffusion {
    Fixed = 0,
    FixedMv = 1,
    Tv = 2,
    TvMv = 3,
}

/// Solver configuration. Obtain defaults from `odf_solver_options_default`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct OdfSolverOptions {
    pub algorithm: OdfAlgorithm,
    /// Prior order q in 1..=5.
    pub order: u32,
    pub diffusion: OdfDiffusion,
    pub abstol: f64,
    pub reltol: f64,
    /// Fixed step size; 0 selects adaptive steps.
    pub fixed_step: f64,
    /// Budget of attempted steps; 0 means unlimited.
    pub max_steps: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct OdfStats {
    pub f_evals: u64,
    pub jac_evals: u64,
    pub steps_accepted: u64,
    pub steps_rejected: u64,
}

/// Vector field `out = f(y, t)`; return 0 on success.
pub type OdfVectorField =
    Option<unsafe extern "C" fn(y: *const f64, t: f64, out: *mut f64, dim: usize, user_data: *mut c_void) -> c_int>;

/// Row-major Jacobian `out[i * dim + j] = ∂f_i/∂y_j`; return 0 on success.
pub type OdfJacobian =
    Option<unsafe extern "C" fn(y: *const f64, t: f64, out: *mut f64, dim: usize, user_data: *mut c_void) -> c_int>;

/// An initial value problem.
pub struct OdfProblem {
    inner: IvProblem,
}

/// The result of a solve.
pub struct OdfPosterior {
    inner: OdePosterior,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

fn fail(status: OdfStatus, msg: impl Into<String>) -> OdfStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> OdfStatus {
    match e {
        Error::UnknownProblem { .. } => OdfStatus::UnknownProblem,
        Error::OutOfRange { .. } => OdfStatus::OutOfRange,
        Error::NonFinite(_) | Error::SingularInnovation | Error::MinStepSize { .. } | Error::MaxSteps(_) => {
            OdfStatus::SolverFailure
        }
        _ => OdfStatus::InvalidArgument,
    }
}

fn guard(body: impl FnOnce() -> OdfStatus) -> OdfStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(s) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(OdfStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn opt_str<'a>(p: *const c_char) -> Result<Option<&'a str>, OdfStatus> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Some)
        .map_err(|_| fail(OdfStatus::InvalidArgument, "string argument is not valid UTF-8"))
}

/// Message of the last failed call on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn odf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn odf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn odf_solver_options_default() -> OdfSolverOptions {
    OdfSolverOptions {
        algorithm: OdfAlgorithm::Eks1,
        order: 3,
        diffusion: OdfDiffusion::Tv,
        abstol: 1e-6,
        reltol: 1e-3,
        fixed_step: 0.0,
        max_steps: 0,
    }
}

/// Looks up a registry problem. `variant` may be NULL.
///
/// # Safety
/// `name` must be a NUL-terminated string, `variant` NULL or NUL-terminated,
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn odf_problem_from_registry(
    name: *const c_char,
    variant: *const c_char,
    out: *mut *mut OdfProblem,
) -> OdfStatus {
    guard(|| {
        if out.is_null() {
            return fail(OdfStatus::NullPointer, "out is NULL");
        }
        *out = ptr::null_mut();
        let name = match opt_str(name) {
            Ok(Some(n)) => n,
            Ok(None) => return fail(OdfStatus::NullPointer, "name is NULL"),
            Err(s) => return s,
        };
        let variant = match opt_str(variant) {
            Ok(v) => v,
            Err(s) => return s,
        };
        match get_problem_variant(name, variant) {
            Ok(p) => {
                *out = Box::into_raw(Box::new(OdfProblem { inner: p }));
                OdfStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

struct Callbacks {
    f: unsafe extern "C" fn(*const f64, f64, *mut f64, usize, *mut c_void) -> c_int,
    jac: OdfJacobian,
    user_data: *mut c_void,
}

// The caller promises the callbacks and `user_data` may be used from any thread.
unsafe impl Send for Callbacks {}
unsafe impl Sync for Callbacks {}

impl Callbacks {
    fn field(&self, y: &DVector<f64>, t: f64) -> DVector<f64> {
        let d = y.len();
        let mut out = DVector::from_element(d, f64::NAN);
        let rc = unsafe { (self.f)(y.as_ptr(), t, out.as_mut_ptr(), d, self.user_data) };
        if rc != 0 {
            out.fill(f64::NAN);
        }
        out
    }

    fn jacobian(&self, y: &DVector<f64>, t: f64) -> DMatrix<f64> {
        let d = y.len();
        let jac = self.jac.expect("only installed when present");
        let mut row_major = vec![f64::NAN; d * d];
        let rc = unsafe { jac(y.as_ptr(), t, row_major.as_mut_ptr(), d, self.user_data) };
        if rc != 0 {
            return DMatrix::from_element(d, d, f64::NAN);
        }
        DMatrix::from_row_slice(d, d, &row_major)
    }
}

/// Builds a problem from C callbacks. `jacobian` may be NULL, in which case
/// finite differences are used. A non-zero return from a callback is treated
/// as a non-finite evaluation. Callbacks must be safe to call from any thread
/// while the problem is alive.
///
/// # Safety
/// `y0` must point to `dim` doubles, `name` must be NULL or NUL-terminated,
/// `out` a valid pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn odf_problem_new(
    name: *const c_char,
    dim: usize,
    y0: *const f64,
    t0: f64,
    t1: f64,
    field: OdfVectorField,
    jacobian: OdfJacobian,
    user_data: *mut c_void,
    out: *mut *mut OdfProblem,
) -> OdfStatus {
    guard(|| {
        if out.is_null() {
            return fail(OdfStatus::NullPointer, "out is NULL");
        }
        *out = ptr::null_mut();
        let Some(f) = field else {
            return fail(OdfStatus::NullPointer, "vector field callback is NULL");
        };
        if y0.is_null() {
            return fail(OdfStatus::NullPointer, "y0 is NULL");
        }
        if dim == 0 {
            return fail(OdfStatus::InvalidArgument, "dimension must be positive");
        }
        if !(t0.is_finite() && t1.is_finite() && t1 > t0) {
            return fail(OdfStatus::InvalidArgument, format!("invalid time span [{t0}, {t1}]"));
        }
        let name = match opt_str(name) {
            Ok(n) => n.unwrap_or("user").to_string(),
            Err(s) => return s,
        };
        let y0 = DVector::from_column_slice(std::slice::from_raw_parts(y0, dim));
        if y0.iter().any(|v| !v.is_finite()) {
            return fail(OdfStatus::InvalidArgument, "y0 has non-finite entries");
        }
        let cb = std::sync::Arc::new(Callbacks {
            f,
            jac: jacobian,
            user_data,
        });
        let cb_f = cb.clone();
        let mut p = IvProblem::new(name, y0, (t0, t1), move |y, t| cb_f.field(y, t));
        if jacobian.is_some() {
            p = p.with_jacobian(move |y, t| cb.jacobian(y, t));
        }
        *out = Box::into_raw(Box::new(OdfProblem { inner: p }));
        OdfStatus::Ok
    })
}

/// # Safety
/// `problem` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn odf_problem_free(problem: *mut OdfProblem) {
    if !problem.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(problem))));
    }
}

/// # Safety
/// `problem` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn odf_problem_dim(problem: *const OdfProblem, out: *mut usize) -> OdfStatus {
    guard(|| {
        if problem.is_null() || out.is_null() {
            return fail(OdfStatus::NullPointer, "argument is NULL");
        }
        *out = (*problem).inner.dim();
        OdfStatus::Ok
    })
}

fn spec_of(o: &OdfSolverOptions) -> Result<SolverSpec, Error> {
    let alg = match o.algorithm {
        OdfAlgorithm::Ekf0 => "ekf0",
        OdfAlgorithm::Ekf1 => "ekf1",
        OdfAlgorithm::Eks0 => "eks0",
        OdfAlgorithm::Eks1 => "eks1",
    };
    let diffusion = match o.diffusion {
        OdfDiffusion::Fixed => DiffusionModel::FixedScalar,
        OdfDiffusion::FixedMv => DiffusionModel::FixedDiagonal,
        OdfDiffusion::Tv => DiffusionModel::TvScalar,
        OdfDiffusion::TvMv => DiffusionModel::TvDiagonal,
    };
    SolverSpec::new(alg, o.order as usize, diffusion)
}

/// Solves `problem`. On `ODF_STATUS_SOLVER_FAILURE` `*out` still receives the
/// partial posterior up to the last accepted step, which must be freed.
///
/// # Safety
/// `problem` must be a live handle, `options` NULL (defaults) or valid, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn odf_solve(
    problem: *const OdfProblem,
    options: *const OdfSolverOptions,
    out: *mut *mut OdfPosterior,
) -> OdfStatus {
    guard(|| {
        if out.is_null() || problem.is_null() {
            return fail(OdfStatus::NullPointer, "argument is NULL");
        }
        *out = ptr::null_mut();
        let opts = if options.is_null() {
            odf_solver_options_default()
        } else {
            *options
        };
        let spec = match spec_of(&opts) {
            Ok(s) => s,
            Err(e) => return fail(status_of(&e), e.to_string()),
        };
        let problem = &(*problem).inner;
        let result = if opts.fixed_step != 0.0 {
            odefilter::solve_fixed(problem, spec, opts.fixed_step)
        } else {
            let cfg = ControllerConfig {
                max_steps: (opts.max_steps > 0).then_some(opts.max_steps as usize),
                ..ControllerConfig::with_tolerances(opts.abstol, opts.reltol)
            };
            if let Err(e) = cfg.validate() {
                return fail(status_of(&e), e.to_string());
            }
            odefilter::solve_adaptive(problem, spec, &cfg)
        };
        match result {
            Ok((post, diag)) => {
                *out = Box::into_raw(Box::new(OdfPosterior { inner: post }));
                if diag.is_success() {
                    OdfStatus::Ok
                } else {
                    fail(OdfStatus::SolverFailure, format!("{}: {}", diag.outcome, diag.message))
                }
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `posterior` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn odf_posterior_free(posterior: *mut OdfPosterior) {
    if !posterior.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(posterior))));
    }
}

unsafe fn with_posterior(posterior: *const OdfPosterior, body: impl FnOnce(&OdePosterior) -> OdfStatus) -> OdfStatus {
    guard(|| {
        if posterior.is_null() {
            return fail(OdfStatus::NullPointer, "posterior is NULL");
        }
        body(&(*posterior).inner)
    })
}

/// Number of grid points, including `t₀`.
///
/// # Safety
/// `posterior` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn odf_posterior_len(posterior: *const OdfPosterior, out: *mut usize) -> OdfStatus {
    with_posterior(posterior, |p| {
        if out.is_null() {
            return fail(OdfStatus::NullPointer, "out is NULL");
        }
        *out = p.len();
        OdfStatus::Ok
    })
}

/// # Safety
/// `posterior` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn odf_posterior_dim(posterior: *const OdfPosterior, out: *mut usize) -> OdfStatus {
    with_posterior(posterior, |p| {
        if out.is_null() {
            return fail(OdfStatus::NullPointer, "out is NULL");
        }
        *out = p.dim();
        OdfStatus::Ok
    })
}

/// # Safety
/// `posterior` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn odf_posterior_stats(posterior: *const OdfPosterior, out: *mut OdfStats) -> OdfStatus {
    with_posterior(posterior, |p| {
        if out.is_null() {
            return fail(OdfStatus::NullPointer, "out is NULL");
        }
        *out = OdfStats {
            f_evals: p.stats.f_evals as u64,
            jac_evals: p.stats.jac_evals as u64,
            steps_accepted: p.stats.steps_accepted as u64,
            steps_rejected: p.stats.steps_rejected as u64,
        };
        OdfStatus::Ok
    })
}

/// Copies the grid into `buf`, which must hold `len` doubles (see `odf_posterior_len`).
///
/// # Safety
/// `posterior` must be a live handle and `buf` point to `capacity` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn odf_posterior_times(
    posterior: *const OdfPosterior,
    buf: *mut f64,
    capacity: usize,
) -> OdfStatus {
    with_posterior(posterior, |p| {
        if buf.is_null() {
            return fail(OdfStatus::NullPointer, "buf is NULL");
        }
        if capacity < p.len() {
            return fail(OdfStatus::BufferTooSmall, format!("need {} doubles", p.len()));
        }
        std::slice::from_raw_parts_mut(buf, p.len()).copy_from_slice(&p.times);
        OdfStatus::Ok
    })
}

unsafe fn write_marginal(m: &DVector<f64>, s: &DVector<f64>, mean: *mut f64, std: *mut f64) {
    if !mean.is_null() {
        std::slice::from_raw_parts_mut(mean, m.len()).copy_from_slice(m.as_slice());
    }
    if !std.is_null() {
        std::slice::from_raw_parts_mut(std, s.len()).copy_from_slice(s.as_slice());
    }
}

/// Mean and standard deviation of the solution at grid node `index`.
/// Either output may be NULL; non-NULL outputs must hold `dim` doubles.
///
/// # Safety
/// `posterior` must be a live handle; outputs NULL or valid for `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn odf_posterior_node(
    posterior: *const OdfPosterior,
    index: usize,
    mean: *mut f64,
    std: *mut f64,
) -> OdfStatus {
    with_posterior(posterior, |p| {
        if index >= p.len() {
            return fail(OdfStatus::OutOfRange, format!("node {index} of {}", p.len()));
        }
        let (m, s) = p.marginal(index);
        write_marginal(&m, &s, mean, std);
        OdfStatus::Ok
    })
}

/// Mean and standard deviation of the solution at any `t` in the solved span.
///
/// # Safety
/// As for `odf_posterior_node`.
#[no_mangle]
pub unsafe extern "C" fn odf_posterior_eval(
    posterior: *const OdfPosterior,
    t: f64,
    mean: *mut f64,
    std: *mut f64,
) -> OdfStatus {
    with_posterior(posterior, |p| match p.dense(t) {
        Ok(state) => {
            let (m, s) = marginal_solution(&state, p.dim());
            write_marginal(&m, &s, mean, std);
            OdfStatus::Ok
        }
        Err(e) => fail(status_of(&e), e.to_string()),
    })
}
