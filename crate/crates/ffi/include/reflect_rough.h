#ifndef REFLECT_ROUGH_H
#define REFLECT_ROUGH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum RrStatus {
  RR_STATUS_OK = 0,
  RR_STATUS_NULL_POINTER = 1,
  RR_STATUS_INVALID_ARGUMENT = 2,
  RR_STATUS_GRID_MISMATCH = 3,
  RR_STATUS_NO_CONVERGENCE = 4,
  RR_STATUS_FLOW_RANGE = 5,
  RR_STATUS_NON_MONOTONE = 6,
  RR_STATUS_UNSUPPORTED = 7,
  RR_STATUS_BUFFER_TOO_SMALL = 8,
  RR_STATUS_INTERNAL = 9,
} RrStatus;

// Sampled rough path on a uniform grid.
typedef struct RrRoughPath RrRoughPath;

// Solution `(Y, K)` on the grid nodes.
typedef struct RrSolution RrSolution;

// Diffusion coefficient and drift.
typedef struct RrVectorField RrVectorField;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *rr_version(void);

// Message of the last failed call on this thread, or null if none.
//
// The pointer stays valid until the next failing call on the same thread.
const char *rr_last_error_message(void);

// Penalty `psi_n(y)`; zero for `y >= 0`.
double rr_psi(uint32_t n, double y);

// Derivative `psi_n'(y)`.
double rr_psi_prime(uint32_t n, double y);

// Samples `dim` fractional Brownian components on `steps` cells of
// `[0, horizon]` and lifts them at Hölder exponent `beta`. Path
// `path_index` of `seed` is reproducible across calls.
//
// # Safety
// `out` must be valid for one pointer write. The handle written there must
// be released with [`rr_rough_path_free`].
enum RrStatus rr_rough_path_sample_fbm(double hurst,
                                       uintptr_t dim,
                                       uintptr_t steps,
                                       double horizon,
                                       uint64_t seed,
                                       uint64_t path_index,
                                       double beta,
                                       struct RrRoughPath **out);

// Lifts the piecewise-linear path through `(steps + 1) * dim` node values
// given node-major in `x`.
//
// # Safety
// `x` must point to `(steps + 1) * dim` readable values and `out` must be
// valid for one pointer write. Release the result with
// [`rr_rough_path_free`].
enum RrStatus rr_rough_path_from_values(uintptr_t dim,
                                        uintptr_t steps,
                                        double horizon,
                                        const double *x,
                                        double beta,
                                        struct RrRoughPath **out);

// Number of grid nodes, `steps + 1`; zero for a null handle.
//
// # Safety
// `path` must be null or a live handle from this library.
uintptr_t rr_rough_path_nodes(const struct RrRoughPath *path);

// Copies component `component` of the first level into `buf`.
//
// # Safety
// `path` must be a live handle and `buf` must point to `len` writable
// values.
enum RrStatus rr_rough_path_copy_component(const struct RrRoughPath *path,
                                           uintptr_t component,
                                           double *buf,
                                           uintptr_t len);

// # Safety
// `path` must be null or a handle from this library not yet freed.
void rr_rough_path_free(struct RrRoughPath *path);

// Parses a vector field from JSON, for example
// `{"sigma": {"kind": "constant", "c": [1.0]}, "drift": {"kind": "none"}}`.
//
// # Safety
// `json` must be a NUL-terminated string and `out` valid for one pointer
// write. Release the result with [`rr_vector_field_free`].
enum RrStatus rr_vector_field_from_json(const char *json, struct RrVectorField **out);

// # Safety
// `vf` must be null or a handle from this library not yet freed.
void rr_vector_field_free(struct RrVectorField *vf);

// Penalised solution `Y^n` started at `y0` above the barrier `boundary`
// sampled at the `len` grid nodes.
//
// # Safety
// `vf` and `path` must be live handles, `boundary` must point to `len`
// readable values and `out` must be valid for one pointer write. Release
// the result with [`rr_solution_free`].
enum RrStatus rr_solve_penalised(const struct RrVectorField *vf,
                                 const struct RrRoughPath *path,
                                 uint32_t n,
                                 const double *boundary,
                                 uintptr_t len,
                                 double y0,
                                 struct RrSolution **out);

// Reflected solution obtained from `Y^{n_max / 2}` and `Y^{n_max}`
// (`n_max` a power of two, at least 2). The result is returned even when
// its reflected-pair certificate does not pass.
//
// # Safety
// As for [`rr_solve_penalised`].
enum RrStatus rr_solve_reflected(const struct RrVectorField *vf,
                                 const struct RrRoughPath *path,
                                 uint32_t n_max,
                                 const double *boundary,
                                 uintptr_t len,
                                 double y0,
                                 struct RrSolution **out);

// Number of nodes in a solution; zero for a null handle.
//
// # Safety
// `sol` must be null or a live handle from this library.
uintptr_t rr_solution_len(const struct RrSolution *sol);

// Copies `Y` into `buf`.
//
// # Safety
// `sol` must be a live handle and `buf` must point to `len` writable values.
enum RrStatus rr_solution_copy_y(const struct RrSolution *sol, double *buf, uintptr_t len);

// Copies `K` into `buf`.
//
// # Safety
// `sol` must be a live handle and `buf` must point to `len` writable values.
enum RrStatus rr_solution_copy_k(const struct RrSolution *sol, double *buf, uintptr_t len);

// # Safety
// `sol` must be null or a handle from this library not yet freed.
void rr_solution_free(struct RrSolution *sol);

// Skorokhod map of the free path `z` against the barrier `l`, all of
// length `len`; writes `Y` and `K`.
//
// # Safety
// `z` and `l` must point to `len` readable values; `y_out` and `k_out` to
// `len` writable values. The input and output buffers must not overlap.
enum RrStatus rr_skorokhod_map(const double *z,
                               const double *l,
                               uintptr_t len,
                               double *y_out,
                               double *k_out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* REFLECT_ROUGH_H */
