//! C ABI over `reflect_rough`.
//!
//! Every fallible function returns an [`RrStatus`]; on failure the message is
//! kept per thread and read back with [`rr_last_error_message`]. Paths, vector
//! fields and solutions are opaque handles released with the matching
//! `rr_*_free`. Output arrays are caller-owned
//! buffers whose length is passed alongside.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use reflect_rough::noise::{lift_geometric, FbmSampler, FbmSpec};
use reflect_rough::rough::{RoughPathGrid, TimeGrid};
use reflect_rough::skorokhod::{reflected_solve_limit, skorokhod_map};
use reflect_rough::solver::{solve_penalised_rde, SolveOptions, VectorField};
use reflect_rough::{penalty, Error};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    GridMismatch = 3,
    NoConvergence = 4,
    FlowRange = 5,
    NonMonotone = 6,
    Unsupported = 7,
    BufferTooSmall = 8,
    Internal = 9,
}

/// Sampled rough path on a uniform grid.
pub struct RrRoughPath(RoughPathGrid);

/// Diffusion coefficient and drift.
pub struct RrVectorField(VectorField);

/// Solution `(Y, K)` on the grid nodes.
pub struct RrSolution {
    y: Vec<f64>,
    k: Vec<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RrStatus {
    match e {
        Error::Domain(_) | Error::Config(_) | Error::Json(_) | Error::Csv(_) => RrStatus::InvalidArgument,
        Error::GridMismatch(_) => RrStatus::GridMismatch,
        Error::ImplicitStep { .. } | Error::NoConvergence { .. } => RrStatus::NoConvergence,
        Error::FlowRange { .. } => RrStatus::FlowRange,
        Error::NonMonotone { .. } => RrStatus::NonMonotone,
        Error::Unsupported(_) => RrStatus::Unsupported,
        Error::Io { .. } => RrStatus::Internal,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (RrStatus, String)>) -> RrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RrStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside reflect_rough".into());
            RrStatus::Internal
        }
    }
}

fn lib<T>(r: reflect_rough::Result<T>) -> Result<T, (RrStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(name: &str) -> (RrStatus, String) {
    (RrStatus::NullPointer, format!("{name} is null"))
}

/// # Safety
/// `p` must be null or point to `len` readable `f64` values.
unsafe fn slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], (RrStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or point to a live handle of type `T`.
unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, (RrStatus, String)> {
    p.as_ref().ok_or_else(|| null(name))
}

/// # Safety
/// `out` must be null or valid for one pointer write.
unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), (RrStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null if none.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Penalty `psi_n(y)`; zero for `y >= 0`.
#[no_mangle]
pub extern "C" fn rr_psi(n: u32, y: f64) -> f64 {
    penalty::psi(n, y)
}

/// Derivative `psi_n'(y)`.
#[no_mangle]
pub extern "C" fn rr_psi_prime(n: u32, y: f64) -> f64 {
    penalty::psi_prime(n, y)
}

/// Samples `dim` fractional Brownian components on `steps` cells of
/// `[0, horizon]` and lifts them at Hölder exponent `beta`. Path
/// `path_index` of `seed` is reproducible across calls.
///
/// # Safety
/// `out` must be valid for one pointer write. The handle written there must
/// be released with [`rr_rough_path_free`].
#[no_mangle]
pub unsafe extern "C" fn rr_rough_path_sample_fbm(
    hurst: f64,
    dim: usize,
    steps: usize,
    horizon: f64,
    seed: u64,
    path_index: u64,
    beta: f64,
    out: *mut *mut RrRoughPath,
) -> RrStatus {
    guard(|| {
        let grid = lib(TimeGrid::new(horizon, steps))?;
        let sampler = lib(FbmSpec::new(hurst, dim, grid, seed).and_then(FbmSampler::new))?;
        let rp = lib(lift_geometric(&sampler.sample(path_index), &grid, beta))?;
        store(out, RrRoughPath(rp))
    })
}

/// Lifts the piecewise-linear path through `(steps + 1) * dim` node values
/// given node-major in `x`.
///
/// # Safety
/// `x` must point to `(steps + 1) * dim` readable values and `out` must be
/// valid for one pointer write. Release the result with
/// [`rr_rough_path_free`].
#[no_mangle]
pub unsafe extern "C" fn rr_rough_path_from_values(
    dim: usize,
    steps: usize,
    horizon: f64,
    x: *const f64,
    beta: f64,
    out: *mut *mut RrRoughPath,
) -> RrStatus {
    guard(|| {
        let grid = lib(TimeGrid::new(horizon, steps))?;
        let len = steps.checked_add(1).and_then(|n| n.checked_mul(dim)).ok_or_else(|| {
            (RrStatus::InvalidArgument, "path size overflows".to_string())
        })?;
        let x = slice(x, len, "x")?.to_vec();
        let rp = lib(RoughPathGrid::piecewise_linear(grid, dim, x, beta))?;
        store(out, RrRoughPath(rp))
    })
}

/// Number of grid nodes, `steps + 1`; zero for a null handle.
///
/// # Safety
/// `path` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn rr_rough_path_nodes(path: *const RrRoughPath) -> usize {
    path.as_ref().map_or(0, |p| p.0.grid().nodes())
}

/// Copies component `component` of the first level into `buf`.
///
/// # Safety
/// `path` must be a live handle and `buf` must point to `len` writable
/// values.
#[no_mangle]
pub unsafe extern "C" fn rr_rough_path_copy_component(
    path: *const RrRoughPath,
    component: usize,
    buf: *mut f64,
    len: usize,
) -> RrStatus {
    guard(|| {
        let p = &handle(path, "path")?.0;
        if component >= p.dim() {
            return Err((RrStatus::InvalidArgument, format!("component {component} >= dim {}", p.dim())));
        }
        copy_out(&p.component(component), buf, len)
    })
}

/// # Safety
/// `path` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rr_rough_path_free(path: *mut RrRoughPath) {
    if !path.is_null() {
        drop(Box::from_raw(path));
    }
}

/// Parses a vector field from JSON, for example
/// `{"sigma": {"kind": "constant", "c": [1.0]}, "drift": {"kind": "none"}}`.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` valid for one pointer
/// write. Release the result with [`rr_vector_field_free`].
#[no_mangle]
pub unsafe extern "C" fn rr_vector_field_from_json(json: *const c_char, out: *mut *mut RrVectorField) -> RrStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| (RrStatus::InvalidArgument, format!("json is not UTF-8: {e}")))?;
        let raw: VectorField =
            serde_json::from_str(text).map_err(|e| (RrStatus::InvalidArgument, e.to_string()))?;
        let vf = lib(VectorField::new(raw.sigma, raw.drift))?;
        store(out, RrVectorField(vf))
    })
}

/// # Safety
/// `vf` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rr_vector_field_free(vf: *mut RrVectorField) {
    if !vf.is_null() {
        drop(Box::from_raw(vf));
    }
}

/// Penalised solution `Y^n` started at `y0` above the barrier `boundary`
/// sampled at the `len` grid nodes.
///
/// # Safety
/// `vf` and `path` must be live handles, `boundary` must point to `len`
/// readable values and `out` must be valid for one pointer write. Release
/// the result with [`rr_solution_free`].
#[no_mangle]
pub unsafe extern "C" fn rr_solve_penalised(
    vf: *const RrVectorField,
    path: *const RrRoughPath,
    n: u32,
    boundary: *const f64,
    len: usize,
    y0: f64,
    out: *mut *mut RrSolution,
) -> RrStatus {
    guard(|| {
        let vf = &handle(vf, "vf")?.0;
        let rp = &handle(path, "path")?.0;
        let l = slice(boundary, len, "boundary")?;
        let sol = lib(solve_penalised_rde(vf, n, rp, l, y0, &SolveOptions::default()))?;
        store(out, RrSolution { y: sol.y, k: sol.k })
    })
}

/// Reflected solution obtained from `Y^{n_max / 2}` and `Y^{n_max}`
/// (`n_max` a power of two, at least 2). The result is returned even when
/// its reflected-pair certificate does not pass.
///
/// # Safety
/// As for [`rr_solve_penalised`].
#[no_mangle]
pub unsafe extern "C" fn rr_solve_reflected(
    vf: *const RrVectorField,
    path: *const RrRoughPath,
    n_max: u32,
    boundary: *const f64,
    len: usize,
    y0: f64,
    out: *mut *mut RrSolution,
) -> RrStatus {
    guard(|| {
        let vf = &handle(vf, "vf")?.0;
        let rp = &handle(path, "path")?.0;
        let l = slice(boundary, len, "boundary")?;
        let lim = lib(reflected_solve_limit(vf, rp, l, y0, n_max, &SolveOptions::default()))?;
        store(out, RrSolution { y: lim.solution.y, k: lim.solution.k })
    })
}

/// Number of nodes in a solution; zero for a null handle.
///
/// # Safety
/// `sol` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn rr_solution_len(sol: *const RrSolution) -> usize {
    sol.as_ref().map_or(0, |s| s.y.len())
}

/// Copies `Y` into `buf`.
///
/// # Safety
/// `sol` must be a live handle and `buf` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn rr_solution_copy_y(sol: *const RrSolution, buf: *mut f64, len: usize) -> RrStatus {
    guard(|| copy_out(&handle(sol, "sol")?.y, buf, len))
}

/// Copies `K` into `buf`.
///
/// # Safety
/// `sol` must be a live handle and `buf` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn rr_solution_copy_k(sol: *const RrSolution, buf: *mut f64, len: usize) -> RrStatus {
    guard(|| copy_out(&handle(sol, "sol")?.k, buf, len))
}

/// # Safety
/// `sol` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rr_solution_free(sol: *mut RrSolution) {
    if !sol.is_null() {
        drop(Box::from_raw(sol));
    }
}

/// Skorokhod map of the free path `z` against the barrier `l`, all of
/// length `len`; writes `Y` and `K`.
///
/// # Safety
/// `z` and `l` must point to `len` readable values; `y_out` and `k_out` to
/// `len` writable values. The input and output buffers must not overlap.
#[no_mangle]
pub unsafe extern "C" fn rr_skorokhod_map(
    z: *const f64,
    l: *const f64,
    len: usize,
    y_out: *mut f64,
    k_out: *mut f64,
) -> RrStatus {
    guard(|| {
        let (y, k) = lib(skorokhod_map(slice(z, len, "z")?, slice(l, len, "l")?))?;
        copy_out(&y, y_out, len)?;
        copy_out(&k, k_out, len)
    })
}

/// # Safety
/// `buf` must be null or point to `len` writable values.
unsafe fn copy_out(src: &[f64], buf: *mut f64, len: usize) -> Result<(), (RrStatus, String)> {
    if buf.is_null() {
        return Err(null("buffer"));
    }
    if len < src.len() {
        return Err((RrStatus::BufferTooSmall, format!("buffer holds {len}, need {}", src.len())));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(())
}
