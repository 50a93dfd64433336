//! C interface to the pinn-pi solver.
//!
//! Every entry point returns a [`PinnStatus`]. On failure the message is
//! available from [`pinnpi_last_error`] on the same thread until the next
//! failing call. Objects are opaque handles released with their `_free`
//! function; passing NULL to a `_free` function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use pinn_pi::driver::{run_pinn_pi_full, RunConfig};
use pinn_pi::improve::{greedy_action, GreedyConfig};
use pinn_pi::net::{load_checkpoint, residual_at, save_checkpoint, ProblemRef, ValueNet};
use pinn_pi::oracle::{solve_riccati_discounted, RiccatiSolution};
use pinn_pi::problems::{ControlProblem, ProblemSpec};
use pinn_pi::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PinnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numerical = 4,
    Assumption = 5,
    Structure = 6,
    Oracle = 7,
    Unsupported = 8,
    Format = 9,
    Io = 10,
    Panic = 11,
}

/// A control problem built from the catalog.
pub struct PinnProblem {
    inner: ControlProblem,
    pref: ProblemRef,
}

/// A value network.
pub struct PinnNet {
    inner: ValueNet,
}

/// Discounted Riccati solution of an unconstrained LQR problem.
pub struct PinnRiccati {
    inner: RiccatiSolution,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> PinnStatus {
    match e {
        Error::Config(_) => PinnStatus::Config,
        Error::Numerical(_) | Error::TrainingDiverged { .. } => PinnStatus::Numerical,
        Error::Assumption(_) => PinnStatus::Assumption,
        Error::Structure(_) => PinnStatus::Structure,
        Error::Oracle(_) => PinnStatus::Oracle,
        Error::UnsupportedComparison(_) => PinnStatus::Unsupported,
        Error::Format(_) => PinnStatus::Format,
        Error::Io(_) => PinnStatus::Io,
    }
}

struct Fail(PinnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PinnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PinnStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            PinnStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(PinnStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(PinnStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

fn check_len(got: usize, want: usize, what: &str) -> Result<(), Fail> {
    if got != want {
        return Err(Fail(
            PinnStatus::InvalidArgument,
            format!("{what} has length {got}, expected {want}"),
        ));
    }
    Ok(())
}

/// Message of the last failure on this thread. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pinnpi_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pinnpi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Build a catalog problem from a TOML table such as
/// `name = "lqr"\nd = 2\nseed = 7`. `seed` is used when the table has none.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pinnpi_problem_new(toml: *const c_char, seed: u64, out: *mut *mut PinnProblem) -> PinnStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let spec: ProblemSpec = ::toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let pref = ProblemRef { seed, problem: spec };
        let inner = pref.build()?;
        *out = Box::into_raw(Box::new(PinnProblem { inner, pref }));
        Ok(())
    })
}

/// # Safety
/// `p` must be NULL or a handle from [`pinnpi_problem_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pinnpi_problem_free(p: *mut PinnProblem) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// State dimension, or 0 for a NULL handle.
///
/// # Safety
/// `p` must be NULL or a live problem handle.
#[no_mangle]
pub unsafe extern "C" fn pinnpi_problem_state_dim(p: *const PinnProblem) -> usize {
    p.as_ref().map_or(0, |p| p.inner.state_dim())
}

/// Action dimension, or 0 for a NULL handle.
///
/// # Safety
/// `p` must be NULL or a live problem handle.
#[no_mangle]
pub unsafe extern "C" fn pinnpi_problem_action_dim(p: *const PinnProblem) -> usize {
    p.as_ref().map_or(0, |p| p.inner.action_dim())
}

/// Greedy action for co-state `z` at state `x`.
///
/// # Safety
/// `x` and `z` point to `state_dim` doubles, `a_out` to `action_dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn pinnpi_greedy_action(
    p: *const PinnProblem,
    x: *const f64,
    z: *const f64,
    state_dim: usize,
    a_out: *mut f64,
    action_dim: usize,
) -> PinnStatus {
    guard(|| {
        let p = handle(p, "problem")?;
        check_len(state_dim, p.inner.state_dim(), "x")?;
        check_len(action_dim, p.inner.action_dim(), "a_out")?;
        let x = slice_arg(x, state_dim, "x")?;
        let z = slice_arg(z, state_dim, "z")?;
        let out = slice_out(a_out, action_dim, "a_out")?;
        out.copy_from_slice(&greedy_action(&p.inner, x, z, &GreedyConfig::default()).action);
        Ok(())
    })
}

/// Solve the discounted Riccati equation of an LQR catalog problem.
///
/// # Safety
/// `p` must be a live problem handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pinnpi_riccati_new(p: *const PinnProblem, out: *mut *mut PinnRiccati) -> PinnStatus {
    guard(|| {
        let p = handle(p, "problem")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let lqr = p
            .pref
            .problem
            .lqr_matrices(p.pref.seed)
            .ok_or_else(|| Error::UnsupportedComparison(p.inner.name().to_string()))?;
        let inner = solve_riccati_discounted(&lqr, p.inner.lambda(), p.inner.sigma_sq())?;
        *out = Box::into_raw(Box::new(PinnRiccati { inner }));
        Ok(())
    })
}

/// # Safety
/// `r` must be NULL or a live Riccati handle.
#[no_mangle]
pub unsafe extern "C" fn pinnpi_riccati_free(r: *mut PinnRiccati) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Copy `P` (column-major, `dim × dim`) and the constant `c` of `V = -xᵀPx + c`.
///
/// # Safety
/// `p_out` points to `dim * dim` doubles, `c_out` to one double.
#[no_mangle]
pub unsafe extern "C" fn pinnpi_riccati_matrix(r: *const PinnRiccati, p_out: *mut f64, dim: usize, c_out: *mut f64) -> PinnStatus {
    guard(|| {
        let r = handle(r, "riccati")?;
        check_len(dim, r.inner.p.nrows(), "dim")?;
        slice_out(p_out, dim * dim, "p_out")?.copy_from_slice(r.inner.p.as_slice());
        *slice_out(c_out, 1, "c_out")?.first_mut().expect("one slot") = r.inner.c;
        Ok(())
    })
}

/// Riccati value at `x`.
///
/// # Safety
/// `x` points to `dim` doubles, `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn pinnpi_riccati_value(r: *const PinnRiccati, x: *const f64, dim: usize, out: *mut f64) -> PinnStatus {
    guard(|| {
        let r = handle(r, "riccati")?;
        check_len(dim, r.inner.p.nrows(), "x")?;
        let x = slice_arg(x, dim, "x")?;
        slice_out(out, 1, "out")?[0] = r.inner.value(x);
        Ok(())
    })
}

/// Load a checkpoint. When `problem_out` is non-NULL and the checkpoint
/// references a problem, that problem is built and returned too (NULL
/// otherwise).
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is valid; `problem_out` is NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn pinnpi_net_load(path: *const c_char, out: *mut *mut PinnNet, problem_out: *mut *mut PinnProblem) -> PinnStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = load_checkpoint(path)?;
        if !problem_out.is_null() {
            *problem_out = match ck.problem {
                Some(pref) => {
                    let inner = pref.build()?;
                    Box::into_raw(Box::new(PinnProblem { inner, pref }))
                }
                None => ptr::null_mut(),
            };
        }
        *out = Box::into_raw(Box::new(PinnNet { inner: ck.net }));
        Ok(())
    })
}

/// Write a checkpoint; `problem` may be NULL.
///
/// # Safety
/// `net` is live, `problem` is NULL or live, `path` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pinnpi_net_save(net: *const PinnNet, problem: *const PinnProblem, path: *const c_char) -> PinnStatus {
    guard(|| {
        let net = handle(net, "net")?;
        let path = str_arg(path, "path")?;
        let pref = problem.as_ref().map(|p| &p.pref);
        save_checkpoint(path, &net.inner, pref)?;
        Ok(())
    })
}

/// # Safety
/// `net` must be NULL or a live network handle.
#[no_mangle]
pub unsafe extern "C" fn pinnpi_net_free(net: *mut PinnNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Input dimension, or 0 for a NULL handle.
///
/// # Safety
/// `net` must be NULL or a live network handle.
#[no_mangle]
pub unsafe extern "C" fn pinnpi_net_input_dim(net: *const PinnNet) -> usize {
    net.as_ref().map_or(0, |n| n.inner.input_dim())
}

/// Value, gradient and `tr(σσᵀ∇²v)` at `x`, using the problem's diffusion.
/// `grad_out` and `trace_out` may be NULL.
///
/// # Safety
/// `x` and `grad_out` (if non-NULL) point to `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn pinnpi_net_eval(
    net: *const PinnNet,
    problem: *const PinnProblem,
    x: *const f64,
    dim: usize,
    value_out: *mut f64,
    grad_out: *mut f64,
    trace_out: *mut f64,
) -> PinnStatus {
    guard(|| {
        let net = handle(net, "net")?;
        let p = handle(problem, "problem")?;
        check_len(dim, net.inner.input_dim(), "x")?;
        check_len(dim, p.inner.state_dim(), "x")?;
        let x = slice_arg(x, dim, "x")?;
        let b = net.inner.eval_bundle(x, p.inner.sigma_sq(), false);
        slice_out(value_out, 1, "value_out")?[0] = b.value;
        if !grad_out.is_null() {
            slice_out(grad_out, dim, "grad_out")?.copy_from_slice(&b.grad);
        }
        if !trace_out.is_null() {
            *trace_out = b.weighted_trace;
        }
        Ok(())
    })
}

/// HJB residual of the net at `x` under action `a`.
///
/// # Safety
/// `x` points to `state_dim` doubles, `a` to `action_dim`, `out` to one.
#[no_mangle]
pub unsafe extern "C" fn pinnpi_net_residual(
    net: *const PinnNet,
    problem: *const PinnProblem,
    x: *const f64,
    state_dim: usize,
    a: *const f64,
    action_dim: usize,
    out: *mut f64,
) -> PinnStatus {
    guard(|| {
        let net = handle(net, "net")?;
        let p = handle(problem, "problem")?;
        check_len(state_dim, p.inner.state_dim(), "x")?;
        check_len(state_dim, net.inner.input_dim(), "x")?;
        check_len(action_dim, p.inner.action_dim(), "a")?;
        let x = slice_arg(x, state_dim, "x")?;
        let a = slice_arg(a, action_dim, "a")?;
        slice_out(out, 1, "out")?[0] = residual_at(&net.inner, &p.inner, x, a);
        Ok(())
    })
}

/// Run the full policy-iteration loop described by a TOML run configuration
/// and return the final network. `iterations_out` may be NULL.
///
/// # Safety
/// `config_toml` is NUL-terminated; `net_out` is valid.
#[no_mangle]
pub unsafe extern "C" fn pinnpi_solve(config_toml: *const c_char, net_out: *mut *mut PinnNet, iterations_out: *mut usize) -> PinnStatus {
    guard(|| {
        let text = str_arg(config_toml, "config_toml")?;
        if net_out.is_null() {
            return Err(null("net_out"));
        }
        let cfg = RunConfig::from_toml(text)?;
        let out = run_pinn_pi_full(&cfg)?;
        if !iterations_out.is_null() {
            *iterations_out = out.trace.len();
        }
        *net_out = Box::into_raw(Box::new(PinnNet { inner: out.net }));
        Ok(())
    })
}
