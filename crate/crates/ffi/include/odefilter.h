#ifndef ODEFILTER_H
#define ODEFILTER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OdfAlgorithm {
  ODF_ALGORITHM_EKF0 = 0,
  ODF_ALGORITHM_EKF1 = 1,
  ODF_ALGORITHM_EKS0 = 2,
  ODF_ALGORITHM_EKS1 = 3,
} OdfAlgorithm;

typedef enum OdfDiffusion {
  ODF_DIFFUSION_FIXED = 0,
  ODF_DIFFUSION_FIXED_MV = 1,
  ODF_DIFFUSION_TV = 2,
  ODF_DIFFUSION_TV_MV = 3,
} OdfDiffusion;

// Result of every call.
typedef enum OdfStatus {
  ODF_STATUS_OK = 0,
  ODF_STATUS_NULL_POINTER = 1,
  ODF_STATUS_INVALID_ARGUMENT = 2,
  ODF_STATUS_UNKNOWN_PROBLEM = 3,
  // The solve started but did not reach the end of the time span.
  ODF_STATUS_SOLVER_FAILURE = 4,
  ODF_STATUS_OUT_OF_RANGE = 5,
  ODF_STATUS_BUFFER_TOO_SMALL = 6,
  ODF_STATUS_PANIC = 7,
} OdfStatus;

// The result of a solve.
typedef struct OdfPosterior OdfPosterior;

// An initial value problem.
typedef struct OdfProblem OdfProblem;

// Solver configuration. Obtain defaults from `odf_solver_options_default`.
typedef struct OdfSolverOptions {
  enum OdfAlgorithm algorithm;
  // Prior order q in 1..=5.
  uint32_t order;
  enum OdfDiffusion diffusion;
  double abstol;
  double reltol;
  // Fixed step size; 0 selects adaptive steps.
  double fixed_step;
  // Budget of attempted steps; 0 means unlimited.
  uint64_t max_steps;
} OdfSolverOptions;

// Vector field `out = f(y, t)`; return 0 on success.
typedef int (*OdfVectorField)(const double *y, double t, double *out, size_t dim, void *user_data);

// Row-major Jacobian `out[i * dim + j] = ∂f_i/∂y_j`; return 0 on success.
typedef int (*OdfJacobian)(const double *y, double t, double *out, size_t dim, void *user_data);

typedef struct OdfStats {
  uint64_t f_evals;
  uint64_t jac_evals;
  uint64_t steps_accepted;
  uint64_t steps_rejected;
} OdfStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty if none. The pointer
// stays valid until the next failing call on the same thread.
const char *odf_last_error(void);

// Library version as a static NUL-terminated string.
const char *odf_version(void);

struct OdfSolverOptions odf_solver_options_default(void);

// Looks up a registry problem. `variant` may be NULL.
//
// # Safety
// `name` must be a NUL-terminated string, `variant` NULL or NUL-terminated,
// `out` a valid pointer.
enum OdfStatus odf_problem_from_registry(const char *name,
                                         const char *variant,
                                         struct OdfProblem **out);

// Builds a problem from C callbacks. `jacobian` may be NULL, in which case
// finite differences are used. A non-zero return from a callback is treated
// as a non-finite evaluation. Callbacks must be safe to call from any thread
// while the problem is alive.
//
// # Safety
// `y0` must point to `dim` doubles, `name` must be NULL or NUL-terminated,
// `out` a valid pointer.
enum OdfStatus odf_problem_new(const char *name,
                               size_t dim,
                               const double *y0,
                               double t0,
                               double t1,
                               OdfVectorField field,
                               OdfJacobian jacobian,
                               void *user_data,
                               struct OdfProblem **out);

// # Safety
// `problem` must be NULL or a handle from this library not yet freed.
void odf_problem_free(struct OdfProblem *problem);

// # Safety
// `problem` must be a live handle and `out` a valid pointer.
enum OdfStatus odf_problem_dim(const struct OdfProblem *problem, size_t *out);

// Solves `problem`. On `ODF_STATUS_SOLVER_FAILURE` `*out` still receives the
// partial posterior up to the last accepted step, which must be freed.
//
// # Safety
// `problem` must be a live handle, `options` NULL (defaults) or valid, `out` valid.
enum OdfStatus odf_solve(const struct OdfProblem *problem,
                         const struct OdfSolverOptions *options,
                         struct OdfPosterior **out);

// # Safety
// `posterior` must be NULL or a handle from this library not yet freed.
void odf_posterior_free(struct OdfPosterior *posterior);

// Number of grid points, including `t₀`.
//
// # Safety
// `posterior` must be a live handle and `out` valid.
enum OdfStatus odf_posterior_len(const struct OdfPosterior *posterior, size_t *out);

// # Safety
// `posterior` must be a live handle and `out` valid.
enum OdfStatus odf_posterior_dim(const struct OdfPosterior *posterior, size_t *out);

// # Safety
// `posterior` must be a live handle and `out` valid.
enum OdfStatus odf_posterior_stats(const struct OdfPosterior *posterior, struct OdfStats *out);

// Copies the grid into `buf`, which must hold `len` doubles (see `odf_posterior_len`).
//
// # Safety
// `posterior` must be a live handle and `buf` point to `capacity` writable doubles.
enum OdfStatus odf_posterior_times(const struct OdfPosterior *posterior,
                                   double *buf,
                                   size_t capacity);

// Mean and standard deviation of the solution at grid node `index`.
// Either output may be NULL; non-NULL outputs must hold `dim` doubles.
//
// # Safety
// `posterior` must be a live handle; outputs NULL or valid for `dim` doubles.
enum OdfStatus odf_posterior_node(const struct OdfPosterior *posterior,
                                  size_t index,
                                  double *mean,
                                  double *std);

// Mean and standard deviation of the solution at any `t` in the solved span.
//
// # Safety
// As for `odf_posterior_node`.
enum OdfStatus odf_posterior_eval(const struct OdfPosterior *posterior,
                                  double t,
                                  double *mean,
                                  double *std);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ODEFILTER_H */
