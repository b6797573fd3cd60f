#ifndef H2SPARSE_H
#define H2SPARSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum H2sStatus {
  H2S_STATUS_OK = 0,
  H2S_STATUS_NULL_POINTER = 1,
  H2S_STATUS_INVALID_ARGUMENT = 2,
  H2S_STATUS_DIMENSION_MISMATCH = 3,
  H2S_STATUS_NOT_SPD = 4,
  H2S_STATUS_SINGULAR = 5,
  H2S_STATUS_IO = 6,
  H2S_STATUS_FORMAT = 7,
  H2S_STATUS_NOT_FACTORED = 8,
  H2S_STATUS_INTERNAL = 9,
  H2S_STATUS_PANIC = 10,
} H2sStatus;

typedef enum H2sKernel {
  // `1/|r_i - r_j|`, zero diagonal.
  H2S_KERNEL_INV_DISTANCE = 0,
  // `2 delta_ij + exp(-|r_i - r_j|^2)`.
  H2S_KERNEL_GAUSS_SHIFTED = 1,
  // Piecewise kernel with radius `d`.
  H2S_KERNEL_PIECEWISE = 2,
} H2sKernel;

typedef enum H2sSolver {
  H2S_SOLVER_CHOLESKY = 0,
  H2S_SOLVER_LU = 1,
} H2sSolver;

// Point cloud handle.
typedef struct H2sCloud H2sCloud;

// Sparse factorization handle, optionally with triangular factors of `S`.
typedef struct H2sFactorization H2sFactorization;

// H² matrix handle.
typedef struct H2sMatrix H2sMatrix;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL terminated,
// truncated to `len`). Returns the full message length in bytes.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t h2s_last_error(char *buf, size_t len);

// Cloud from `n` points stored row by row (`coords[i * dim + k]`).
//
// # Safety
// `coords` must point to `n * dim` values; `out` must be writable.
enum H2sStatus h2s_cloud_new(size_t dim, size_t n, const double *coords, struct H2sCloud **out);

// `n` uniform random points in the unit square or cube.
//
// # Safety
// `out` must be writable.
enum H2sStatus h2s_cloud_uniform(size_t dim, size_t n, uint64_t seed, struct H2sCloud **out);

// # Safety
// `cloud` must be null or a handle from this library, not yet freed.
void h2s_cloud_free(struct H2sCloud *cloud);

// Builds the H² approximation of a kernel matrix on `cloud`. `d` is only
// read for the piecewise kernel.
//
// # Safety
// `cloud` must be a live handle; `out` must be writable.
enum H2sStatus h2s_h2_build(const struct H2sCloud *cloud,
                            enum H2sKernel kernel,
                            double d,
                            size_t leaf_size,
                            double eta,
                            double eps,
                            struct H2sMatrix **out);

// # Safety
// `h2` must be null or a handle from this library, not yet freed.
void h2s_h2_free(struct H2sMatrix *h2);

// Matrix dimension, or 0 for a null handle.
//
// # Safety
// `h2` must be null or a live handle.
size_t h2s_h2_size(const struct H2sMatrix *h2);

// `y = A x` with vectors of length `n`.
//
// # Safety
// `x` and `y` must point to `n` values each.
enum H2sStatus h2s_h2_matvec(const struct H2sMatrix *h2, const double *x, double *y, size_t n);

// # Safety
// `h2` must be a live handle and `file` a NUL-terminated path.
enum H2sStatus h2s_h2_save(const struct H2sMatrix *h2, const char *file);

// # Safety
// `file` must be a NUL-terminated path; `out` must be writable.
enum H2sStatus h2s_h2_load(const char *file, struct H2sMatrix **out);

// Computes `A = U S V^T` from an H² matrix.
//
// # Safety
// `h2` must be a live handle; `out` must be writable.
enum H2sStatus h2s_factorize(const struct H2sMatrix *h2, struct H2sFactorization **out);

// # Safety
// `f` must be null or a handle from this library, not yet freed.
void h2s_factorization_free(struct H2sFactorization *f);

// Number of stored entries of `S`, or 0 for a null handle.
//
// # Safety
// `f` must be null or a live handle.
size_t h2s_factorization_nnz(const struct H2sFactorization *f);

// Dimension of `S` (always equal to that of `A`), or 0 for a null handle.
//
// # Safety
// `f` must be null or a live handle.
size_t h2s_factorization_size(const struct H2sFactorization *f);

// `y = U S V^T x`.
//
// # Safety
// `x` and `y` must point to `n` values each.
enum H2sStatus h2s_factorization_matvec(const struct H2sFactorization *f,
                                        const double *x,
                                        double *y,
                                        size_t n);

// Factors `S` with a fill-reducing ordering; required before solving.
//
// # Safety
// `f` must be a live handle.
enum H2sStatus h2s_factorization_prepare(struct H2sFactorization *f, enum H2sSolver solver);

// Solves `U S V^T x = b` with the factors from [`h2s_factorization_prepare`].
//
// # Safety
// `b` and `x` must point to `n` values each.
enum H2sStatus h2s_factorization_solve(const struct H2sFactorization *f,
                                       const double *b,
                                       double *x,
                                       size_t n);

// Writes `S` in MatrixMarket coordinate format.
//
// # Safety
// `f` must be a live handle and `file` a NUL-terminated path.
enum H2sStatus h2s_factorization_write_s(const struct H2sFactorization *f, const char *file);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* H2SPARSE_H */
