//! C interface to `h2sparse`.
//!
//! All objects are opaque handles created by `*_new`/`*_build`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns an [`H2sStatus`]; on failure a description is available from
//! [`h2s_last_error`] on the same thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use h2sparse::geometry::{BlockClusterTree, ClusterTree, PointCloud};
use h2sparse::h2::H2Matrix;
use h2sparse::io;
use h2sparse::kernels::{KernelMatrix, KernelSpec};
use h2sparse::linsolve::{direct_solve, sparse_cholesky, sparse_lu, Ordering, TriangularFactors};
use h2sparse::sparsifier::SparseFactorization;
use h2sparse::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum H2sStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NotSpd = 4,
    Singular = 5,
    Io = 6,
    Format = 7,
    NotFactored = 8,
    Internal = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum H2sKernel {
    /// `1/|r_i - r_j|`, zero diagonal.
    InvDistance = 0,
    /// `2 delta_ij + exp(-|r_i - r_j|^2)`.
    GaussShifted = 1,
    /// Piecewise kernel with radius `d`.
    Piecewise = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum H2sSolver {
    Cholesky = 0,
    Lu = 1,
}

/// Point cloud handle.
pub struct H2sCloud(PointCloud);

/// H² matrix handle.
pub struct H2sMatrix(H2Matrix);

/// Sparse factorization handle, optionally with triangular factors of `S`.
pub struct H2sFactorization {
    f: SparseFactorization,
    factors: Option<TriangularFactors>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> H2sStatus {
    match e {
        Error::DimensionMismatch { .. } => H2sStatus::DimensionMismatch,
        Error::NotSpd { .. } => H2sStatus::NotSpd,
        Error::Singular(_) => H2sStatus::Singular,
        Error::Io(_) => H2sStatus::Io,
        Error::Format(_) => H2sStatus::Format,
        Error::BasesNotOrthogonal { .. } => H2sStatus::Internal,
        _ => H2sStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), H2sStatus>) -> H2sStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => H2sStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => {
            set_error("internal panic".into());
            H2sStatus::Panic
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, H2sStatus>;
}

impl<T> OrStatus<T> for h2sparse::Result<T> {
    fn or_status(self) -> Result<T, H2sStatus> {
        self.map_err(|e| {
            set_error(e.to_string());
            status_of(&e)
        })
    }
}

fn null() -> H2sStatus {
    set_error("null pointer argument".into());
    H2sStatus::NullPointer
}

unsafe fn deref<'a, T>(p: *const T) -> Result<&'a T, H2sStatus> {
    p.as_ref().ok_or_else(null)
}

unsafe fn slice<'a>(p: *const f64, len: usize) -> Result<&'a [f64], H2sStatus> {
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize) -> Result<&'a mut [f64], H2sStatus> {
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a str, H2sStatus> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("path is not valid UTF-8".into());
        H2sStatus::InvalidArgument
    })
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), H2sStatus> {
    if out.is_null() {
        return Err(null());
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn check_len(expected: usize, got: usize) -> Result<(), H2sStatus> {
    if expected != got {
        set_error(format!("dimension mismatch: expected {expected}, got {got}"));
        return Err(H2sStatus::DimensionMismatch);
    }
    Ok(())
}

/// Copies the last error message of this thread into `buf` (NUL terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn h2s_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Cloud from `n` points stored row by row (`coords[i * dim + k]`).
///
/// # Safety
/// `coords` must point to `n * dim` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn h2s_cloud_new(dim: usize, n: usize, coords: *const f64, out: *mut *mut H2sCloud) -> H2sStatus {
    guard(|| {
        let c = slice(coords, n.checked_mul(dim).ok_or(H2sStatus::InvalidArgument)?)?;
        let cloud = PointCloud::new(dim, c.to_vec()).or_status()?;
        put(out, H2sCloud(cloud))
    })
}

/// `n` uniform random points in the unit square or cube.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn h2s_cloud_uniform(dim: usize, n: usize, seed: u64, out: *mut *mut H2sCloud) -> H2sStatus {
    guard(|| put(out, H2sCloud(PointCloud::uniform_random(dim, n, seed).or_status()?)))
}

/// # Safety
/// `cloud` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn h2s_cloud_free(cloud: *mut H2sCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Builds the H² approximation of a kernel matrix on `cloud`. `d` is only
/// read for the piecewise kernel.
///
/// # Safety
/// `cloud` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn h2s_h2_build(
    cloud: *const H2sCloud,
    kernel: H2sKernel,
    d: f64,
    leaf_size: usize,
    eta: f64,
    eps: f64,
    out: *mut *mut H2sMatrix,
) -> H2sStatus {
    guard(|| {
        let cloud = &deref(cloud)?.0;
        let spec = match kernel {
            H2sKernel::InvDistance => KernelSpec::InvDistance,
            H2sKernel::GaussShifted => KernelSpec::GaussShifted,
            H2sKernel::Piecewise => KernelSpec::PiecewiseD { d },
        };
        let source = KernelMatrix::new(spec, cloud).or_status()?;
        let tree = ClusterTree::build(cloud, leaf_size).or_status()?;
        let bct = BlockClusterTree::symmetric(tree, eta).or_status()?;
        put(out, H2sMatrix(H2Matrix::build(&source, bct, eps).or_status()?))
    })
}

/// # Safety
/// `h2` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn h2s_h2_free(h2: *mut H2sMatrix) {
    if !h2.is_null() {
        drop(Box::from_raw(h2));
    }
}

/// Matrix dimension, or 0 for a null handle.
///
/// # Safety
/// `h2` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn h2s_h2_size(h2: *const H2sMatrix) -> usize {
    h2.as_ref().map_or(0, |h| h.0.size())
}

/// `y = A x` with vectors of length `n`.
///
/// # Safety
/// `x` and `y` must point to `n` values each.
#[no_mangle]
pub unsafe extern "C" fn h2s_h2_matvec(h2: *const H2sMatrix, x: *const f64, y: *mut f64, n: usize) -> H2sStatus {
    guard(|| {
        let h2 = &deref(h2)?.0;
        check_len(h2.size(), n)?;
        let r = h2.matvec(slice(x, n)?).or_status()?;
        slice_mut(y, n)?.copy_from_slice(&r);
        Ok(())
    })
}

/// # Safety
/// `h2` must be a live handle and `file` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn h2s_h2_save(h2: *const H2sMatrix, file: *const c_char) -> H2sStatus {
    guard(|| {
        let h2 = &deref(h2)?.0;
        let w = BufWriter::new(File::create(path(file)?).map_err(Error::from).or_status()?);
        io::write_h2(w, h2).or_status()
    })
}

/// # Safety
/// `file` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn h2s_h2_load(file: *const c_char, out: *mut *mut H2sMatrix) -> H2sStatus {
    guard(|| {
        let r = BufReader::new(File::open(path(file)?).map_err(Error::from).or_status()?);
        put(out, H2sMatrix(io::read_h2(r).or_status()?))
    })
}

/// Computes `A = U S V^T` from an H² matrix.
///
/// # Safety
/// `h2` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn h2s_factorize(h2: *const H2sMatrix, out: *mut *mut H2sFactorization) -> H2sStatus {
    guard(|| {
        let f = SparseFactorization::from_h2(&deref(h2)?.0).or_status()?;
        put(out, H2sFactorization { f, factors: None })
    })
}

/// # Safety
/// `f` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn h2s_factorization_free(f: *mut H2sFactorization) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Number of stored entries of `S`, or 0 for a null handle.
///
/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn h2s_factorization_nnz(f: *const H2sFactorization) -> usize {
    f.as_ref().map_or(0, |f| f.f.s.nnz())
}

/// Dimension of `S` (always equal to that of `A`), or 0 for a null handle.
///
/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn h2s_factorization_size(f: *const H2sFactorization) -> usize {
    f.as_ref().map_or(0, |f| f.f.size())
}

/// `y = U S V^T x`.
///
/// # Safety
/// `x` and `y` must point to `n` values each.
#[no_mangle]
pub unsafe extern "C" fn h2s_factorization_matvec(
    f: *const H2sFactorization,
    x: *const f64,
    y: *mut f64,
    n: usize,
) -> H2sStatus {
    guard(|| {
        let f = &deref(f)?.f;
        check_len(f.size(), n)?;
        let r = f.matvec(slice(x, n)?).or_status()?;
        slice_mut(y, n)?.copy_from_slice(&r);
        Ok(())
    })
}

/// Factors `S` with a fill-reducing ordering; required before solving.
///
/// # Safety
/// `f` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn h2s_factorization_prepare(f: *mut H2sFactorization, solver: H2sSolver) -> H2sStatus {
    guard(|| {
        let f = f.as_mut().ok_or_else(null)?;
        let factors = match solver {
            H2sSolver::Cholesky => sparse_cholesky(&f.f.s, Ordering::FillReducing),
            H2sSolver::Lu => sparse_lu(&f.f.s, Ordering::FillReducing),
        }
        .or_status()?;
        f.factors = Some(factors);
        Ok(())
    })
}

/// Solves `U S V^T x = b` with the factors from [`h2s_factorization_prepare`].
///
/// # Safety
/// `b` and `x` must point to `n` values each.
#[no_mangle]
pub unsafe extern "C" fn h2s_factorization_solve(
    f: *const H2sFactorization,
    b: *const f64,
    x: *mut f64,
    n: usize,
) -> H2sStatus {
    guard(|| {
        let f = deref(f)?;
        check_len(f.f.size(), n)?;
        let Some(factors) = &f.factors else {
            set_error("call h2s_factorization_prepare first".into());
            return Err(H2sStatus::NotFactored);
        };
        let r = direct_solve(&f.f, factors, slice(b, n)?).or_status()?;
        slice_mut(x, n)?.copy_from_slice(&r);
        Ok(())
    })
}

/// Writes `S` in MatrixMarket coordinate format.
///
/// # Safety
/// `f` must be a live handle and `file` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn h2s_factorization_write_s(f: *const H2sFactorization, file: *const c_char) -> H2sStatus {
    guard(|| {
        let f = &deref(f)?.f;
        let w = BufWriter::new(File::create(path(file)?).map_err(Error::from).or_status()?);
        f.s.write_matrix_market(w, &[format!("N = {}", f.size())]).or_status()
    })
}
