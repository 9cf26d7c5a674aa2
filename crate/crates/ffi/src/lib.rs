//! C interface to `mixlab`.
//!
//! Every function returns a [`MixlabStatus`]; results come back through out
//! pointers. Objects are opaque handles created by `*_new` functions and
//! released with the matching `*_free`. After a non-`OK` status,
//! [`mixlab_last_error`] describes the failure on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mixlab::actionangle::{build_cellular_chart, ActionAngleChart};
use mixlab::config::ExperimentConfig;
use mixlab::diagnostics::sobolev_norm;
use mixlab::oracle::{mixing_envelope, EnvelopeRegime};
use mixlab::period::{period_agm, period_derivative, period_quadrature};
use mixlab::spectral::{ScalarField, Solver};
use mixlab::{HamiltonianField, MixlabError};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    LevelOutOfRange = 3,
    Stall = 4,
    NoReturn = 5,
    DegenerateField = 6,
    Cfl = 7,
    OutsideChart = 8,
    Fit = 9,
    Parse = 10,
    Config = 11,
    UnknownExperiment = 12,
    Io = 13,
    Serialization = 14,
    Panic = 99,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixlabRegime {
    Interior = 0,
    Elliptic = 1,
    Global = 2,
}

/// Hamiltonian field handle.
pub struct MixlabField(HamiltonianField);

/// Scalar field on the `N × N` torus grid.
pub struct MixlabScalar(ScalarField);

/// Advection-diffusion solver state.
pub struct MixlabSolver(Solver);

/// Action-angle chart of the cellular flow.
pub struct MixlabChart(ActionAngleChart);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &MixlabError) -> MixlabStatus {
    match err {
        MixlabError::InvalidArgument(_) => MixlabStatus::InvalidArgument,
        MixlabError::LevelOutOfRange { .. } => MixlabStatus::LevelOutOfRange,
        MixlabError::Stall { .. } => MixlabStatus::Stall,
        MixlabError::NoReturn { .. } => MixlabStatus::NoReturn,
        MixlabError::DegenerateField(_) => MixlabStatus::DegenerateField,
        MixlabError::Cfl { .. } => MixlabStatus::Cfl,
        MixlabError::OutsideChart(_) => MixlabStatus::OutsideChart,
        MixlabError::Fit(_) => MixlabStatus::Fit,
        MixlabError::Parse { .. } => MixlabStatus::Parse,
        MixlabError::Config(_) => MixlabStatus::Config,
        MixlabError::UnknownExperiment(_) => MixlabStatus::UnknownExperiment,
        MixlabError::Io(_) => MixlabStatus::Io,
        MixlabError::Json(_) => MixlabStatus::Serialization,
    }
}

enum Failure {
    Null(&'static str),
    Lib(MixlabError),
}

impl From<MixlabError> for Failure {
    fn from(e: MixlabError) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> MixlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MixlabStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            MixlabStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            MixlabStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn string<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Lib(MixlabError::InvalidArgument(format!("{what} is not UTF-8"))))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failure on this thread; valid until the next call
/// into the library from the same thread.
#[no_mangle]
pub extern "C" fn mixlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mixlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Parses `cellular`, `shear-cos` or `expr:<formula>`.
///
/// # Safety
/// `spec` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mixlab_field_new(spec: *const c_char, out: *mut *mut MixlabField) -> MixlabStatus {
    guard(|| {
        let f = HamiltonianField::from_spec(string(spec, "spec")?)?;
        put(out, boxed(MixlabField(f)), "out")
    })
}

/// # Safety
/// `field` must come from [`mixlab_field_new`] (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mixlab_field_free(field: *mut MixlabField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// `H(x)` and the velocity `∇⊥H(x)`; either output may be null.
///
/// # Safety
/// `field` must be a live handle; non-null outputs must be writable
/// (`velocity` for two doubles).
#[no_mangle]
pub unsafe extern "C" fn mixlab_field_eval(
    field: *const MixlabField,
    x1: f64,
    x2: f64,
    value: *mut f64,
    velocity: *mut f64,
) -> MixlabStatus {
    guard(|| {
        let f = &deref(field, "field")?.0;
        if !value.is_null() {
            value.write(f.value([x1, x2]));
        }
        if !velocity.is_null() {
            let v = f.velocity([x1, x2]);
            velocity.write(v[0]);
            velocity.add(1).write(v[1]);
        }
        Ok(())
    })
}

/// Cellular-flow period `T(h)` by the AGM (`method = 0`) or by quadrature
/// (`method = 1`).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mixlab_period(h: f64, method: i32, out: *mut f64) -> MixlabStatus {
    guard(|| {
        let t = match method {
            0 => period_agm(h)?,
            1 => period_quadrature(h)?,
            m => return Err(MixlabError::InvalidArgument(format!("unknown period method {m}")).into()),
        };
        put(out, t, "out")
    })
}

/// `T′(h)` of the cellular flow.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mixlab_period_derivative(h: f64, out: *mut f64) -> MixlabStatus {
    guard(|| put(out, period_derivative(h)?, "out"))
}

/// Upper envelope of the mixing rate at time `t`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mixlab_mixing_envelope(t: f64, eps: f64, regime: MixlabRegime, out: *mut f64) -> MixlabStatus {
    guard(|| {
        let r = match regime {
            MixlabRegime::Interior => EnvelopeRegime::Interior,
            MixlabRegime::Elliptic => EnvelopeRegime::Elliptic,
            MixlabRegime::Global => EnvelopeRegime::Global,
        };
        put(out, mixing_envelope(t, eps, r)?, "out")
    })
}

/// Scalar field from `n × n` grid values, row-major with index `j*n + i`
/// at `(2πi/n, 2πj/n)`.
///
/// # Safety
/// `values` must hold `n * n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mixlab_scalar_new(n: usize, values: *const f64, out: *mut *mut MixlabScalar) -> MixlabStatus {
    guard(|| {
        if values.is_null() {
            return Err(Failure::Null("values"));
        }
        let len = n.checked_mul(n).ok_or_else(|| MixlabError::InvalidArgument("n too large".into()))?;
        let v = std::slice::from_raw_parts(values, len);
        put(out, boxed(MixlabScalar(ScalarField::from_physical(n, v)?)), "out")
    })
}

/// # Safety
/// `scalar` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mixlab_scalar_free(scalar: *mut MixlabScalar) {
    if !scalar.is_null() {
        drop(Box::from_raw(scalar));
    }
}

/// Grid size `N`.
///
/// # Safety
/// `scalar` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mixlab_scalar_size(scalar: *const MixlabScalar, out: *mut usize) -> MixlabStatus {
    guard(|| put(out, deref(scalar, "scalar")?.0.n(), "out"))
}

/// Copies the grid values into `buf`, which must hold `len ≥ N²` doubles.
///
/// # Safety
/// `scalar` must be a live handle; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mixlab_scalar_values(scalar: *const MixlabScalar, buf: *mut f64, len: usize) -> MixlabStatus {
    guard(|| {
        let v = deref(scalar, "scalar")?.0.to_physical();
        if buf.is_null() {
            return Err(Failure::Null("buf"));
        }
        if len < v.len() {
            return Err(MixlabError::InvalidArgument(format!("buffer holds {len} values, need {}", v.len())).into());
        }
        ptr::copy_nonoverlapping(v.as_ptr(), buf, v.len());
        Ok(())
    })
}

/// Homogeneous Sobolev norm of order −1, 0 or 1.
///
/// # Safety
/// `scalar` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mixlab_scalar_norm(scalar: *const MixlabScalar, order: i32, out: *mut f64) -> MixlabStatus {
    guard(|| put(out, sobolev_norm(&deref(scalar, "scalar")?.0, order)?, "out"))
}

/// Solver for `∂ₜρ + b·∇ρ = νΔρ` started from a copy of `rho0`.
///
/// # Safety
/// `field` and `rho0` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mixlab_solver_new(
    field: *const MixlabField,
    rho0: *const MixlabScalar,
    nu: f64,
    out: *mut *mut MixlabSolver,
) -> MixlabStatus {
    guard(|| {
        let s = Solver::new(&deref(field, "field")?.0, &deref(rho0, "rho0")?.0, nu)?;
        put(out, boxed(MixlabSolver(s)), "out")
    })
}

/// # Safety
/// `solver` must come from [`mixlab_solver_new`] (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mixlab_solver_free(solver: *mut MixlabSolver) {
    if !solver.is_null() {
        drop(Box::from_raw(solver));
    }
}

/// Advances to absolute time `t`.
///
/// # Safety
/// `solver` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mixlab_solver_advance(solver: *mut MixlabSolver, t: f64) -> MixlabStatus {
    guard(|| Ok(deref_mut(solver, "solver")?.0.advance(t)?))
}

/// Current time and `‖ρ‖_{L²}`; either output may be null.
///
/// # Safety
/// `solver` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mixlab_solver_status(solver: *const MixlabSolver, time: *mut f64, l2: *mut f64) -> MixlabStatus {
    guard(|| {
        let s = &deref(solver, "solver")?.0;
        if !time.is_null() {
            time.write(s.time());
        }
        if !l2.is_null() {
            l2.write(s.l2_sq().sqrt());
        }
        Ok(())
    })
}

/// Copy of the current state as a new scalar handle.
///
/// # Safety
/// `solver` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mixlab_solver_state(solver: *const MixlabSolver, out: *mut *mut MixlabScalar) -> MixlabStatus {
    guard(|| {
        let st = deref(solver, "solver")?.0.state();
        put(out, boxed(MixlabScalar(st)), "out")
    })
}

/// Cellular chart on `n_levels` actions `I ∈ [i0, i1]` and `n_theta` angles.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mixlab_chart_cellular(
    i0: f64,
    i1: f64,
    n_theta: usize,
    n_levels: usize,
    out: *mut *mut MixlabChart,
) -> MixlabStatus {
    guard(|| put(out, boxed(MixlabChart(build_cellular_chart(i0, i1, n_theta, n_levels)?)), "out"))
}

/// # Safety
/// `chart` must come from [`mixlab_chart_cellular`] (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mixlab_chart_free(chart: *mut MixlabChart) {
    if !chart.is_null() {
        drop(Box::from_raw(chart));
    }
}

/// Position `Φ(θ, level)` with `θ ∈ [0, 1)`, written to `xy[0..2]`.
///
/// # Safety
/// `chart` must be a live handle; `xy` must hold two doubles.
#[no_mangle]
pub unsafe extern "C" fn mixlab_chart_eval(chart: *const MixlabChart, theta: f64, level: f64, xy: *mut f64) -> MixlabStatus {
    guard(|| {
        let p = deref(chart, "chart")?.0.eval(theta, level)?;
        if xy.is_null() {
            return Err(Failure::Null("xy"));
        }
        xy.write(p[0]);
        xy.add(1).write(p[1]);
        Ok(())
    })
}

/// Largest relative deviation of `|det DΦ|` from its expected value.
///
/// # Safety
/// `chart` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mixlab_chart_jacobian_error(chart: *const MixlabChart, out: *mut f64) -> MixlabStatus {
    guard(|| put(out, deref(chart, "chart")?.0.jacobian_error(), "out"))
}

/// Runs the experiment in the config file at `path`. `output_dir` may be
/// null to keep the config's directory; `workers = 0` selects the default.
///
/// # Safety
/// `path` must be a NUL-terminated string; `output_dir` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mixlab_run_config(path: *const c_char, output_dir: *const c_char, workers: usize) -> MixlabStatus {
    guard(|| {
        let cfg = ExperimentConfig::load(Path::new(string(path, "path")?))?;
        let dir = if output_dir.is_null() { None } else { Some(Path::new(string(output_dir, "output_dir")?)) };
        mixlab::runner::run(&cfg, dir, if workers == 0 { None } else { Some(workers) })?;
        Ok(())
    })
}
