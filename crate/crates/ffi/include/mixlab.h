#ifndef MIXLAB_H
#define MIXLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MixlabRegime {
  MIXLAB_REGIME_INTERIOR = 0,
  MIXLAB_REGIME_ELLIPTIC = 1,
  MIXLAB_REGIME_GLOBAL = 2,
} MixlabRegime;

typedef enum MixlabStatus {
  MIXLAB_STATUS_OK = 0,
  MIXLAB_STATUS_NULL_POINTER = 1,
  MIXLAB_STATUS_INVALID_ARGUMENT = 2,
  MIXLAB_STATUS_LEVEL_OUT_OF_RANGE = 3,
  MIXLAB_STATUS_STALL = 4,
  MIXLAB_STATUS_NO_RETURN = 5,
  MIXLAB_STATUS_DEGENERATE_FIELD = 6,
  MIXLAB_STATUS_CFL = 7,
  MIXLAB_STATUS_OUTSIDE_CHART = 8,
  MIXLAB_STATUS_FIT = 9,
  MIXLAB_STATUS_PARSE = 10,
  MIXLAB_STATUS_CONFIG = 11,
  MIXLAB_STATUS_UNKNOWN_EXPERIMENT = 12,
  MIXLAB_STATUS_IO = 13,
  MIXLAB_STATUS_SERIALIZATION = 14,
  MIXLAB_STATUS_PANIC = 99,
} MixlabStatus;

/**
 * Action-angle chart of the cellular flow.
 */
typedef struct MixlabChart MixlabChart;

/**
 * Hamiltonian field handle.
 */
typedef struct MixlabField MixlabField;

/**
 * Scalar field on the `N × N` torus grid.
 */
typedef struct MixlabScalar MixlabScalar;

/**
 * Advection-diffusion solver state.
 */
typedef struct MixlabSolver MixlabSolver;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; valid until the next call
 * into the library from the same thread.
 */
const char *mixlab_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mixlab_version(void);

/**
 * Parses `cellular`, `shear-cos` or `expr:<formula>`.
 *
 * # Safety
 * `spec` must be a NUL-terminated string; `out` must be writable.
 */
enum MixlabStatus mixlab_field_new(const char *spec, struct MixlabField **out);

/**
 * # Safety
 * `field` must come from [`mixlab_field_new`] (or be null) and not be used afterwards.
 */
void mixlab_field_free(struct MixlabField *field);

/**
 * `H(x)` and the velocity `∇⊥H(x)`; either output may be null.
 *
 * # Safety
 * `field` must be a live handle; non-null outputs must be writable
 * (`velocity` for two doubles).
 */
enum MixlabStatus mixlab_field_eval(const struct MixlabField *field,
                                    double x1,
                                    double x2,
                                    double *value,
                                    double *velocity);

/**
 * Cellular-flow period `T(h)` by the AGM (`method = 0`) or by quadrature
 * (`method = 1`).
 *
 * # Safety
 * `out` must be writable.
 */
enum MixlabStatus mixlab_period(double h, int32_t method, double *out);

/**
 * `T′(h)` of the cellular flow.
 *
 * # Safety
 * `out` must be writable.
 */
enum MixlabStatus mixlab_period_derivative(double h, double *out);

/**
 * Upper envelope of the mixing rate at time `t`.
 *
 * # Safety
 * `out` must be writable.
 */
enum MixlabStatus mixlab_mixing_envelope(double t,
                                         double eps,
                                         enum MixlabRegime regime,
                                         double *out);

/**
 * Scalar field from `n × n` grid values, row-major with index `j*n + i`
 * at `(2πi/n, 2πj/n)`.
 *
 * # Safety
 * `values` must hold `n * n` doubles; `out` must be writable.
 */
enum MixlabStatus mixlab_scalar_new(size_t n, const double *values, struct MixlabScalar **out);

/**
 * # Safety
 * `scalar` must come from this library (or be null) and not be used afterwards.
 */
void mixlab_scalar_free(struct MixlabScalar *scalar);

/**
 * Grid size `N`.
 *
 * # Safety
 * `scalar` must be a live handle; `out` must be writable.
 */
enum MixlabStatus mixlab_scalar_size(const struct MixlabScalar *scalar, size_t *out);

/**
 * Copies the grid values into `buf`, which must hold `len ≥ N²` doubles.
 *
 * # Safety
 * `scalar` must be a live handle; `buf` must hold `len` doubles.
 */
enum MixlabStatus mixlab_scalar_values(const struct MixlabScalar *scalar, double *buf, size_t len);

/**
 * Homogeneous Sobolev norm of order −1, 0 or 1.
 *
 * # Safety
 * `scalar` must be a live handle; `out` must be writable.
 */
enum MixlabStatus mixlab_scalar_norm(const struct MixlabScalar *scalar, int32_t order, double *out);

/**
 * Solver for `∂ₜρ + b·∇ρ = νΔρ` started from a copy of `rho0`.
 *
 * # Safety
 * `field` and `rho0` must be live handles; `out` must be writable.
 */
enum MixlabStatus mixlab_solver_new(const struct MixlabField *field,
                                    const struct MixlabScalar *rho0,
                                    double nu,
                                    struct MixlabSolver **out);

/**
 * # Safety
 * `solver` must come from [`mixlab_solver_new`] (or be null) and not be used afterwards.
 */
void mixlab_solver_free(struct MixlabSolver *solver);

/**
 * Advances to absolute time `t`.
 *
 * # Safety
 * `solver` must be a live handle.
 */
enum MixlabStatus mixlab_solver_advance(struct MixlabSolver *solver, double t);

/**
 * Current time and `‖ρ‖_{L²}`; either output may be null.
 *
 * # Safety
 * `solver` must be a live handle; non-null outputs must be writable.
 */
enum MixlabStatus mixlab_solver_status(const struct MixlabSolver *solver, double *time, double *l2);

/**
 * Copy of the current state as a new scalar handle.
 *
 * # Safety
 * `solver` must be a live handle; `out` must be writable.
 */
enum MixlabStatus mixlab_solver_state(const struct MixlabSolver *solver, struct MixlabScalar **out);

/**
 * Cellular chart on `n_levels` actions `I ∈ [i0, i1]` and `n_theta` angles.
 *
 * # Safety
 * `out` must be writable.
 */
enum MixlabStatus mixlab_chart_cellular(double i0,
                                        double i1,
                                        size_t n_theta,
                                        size_t n_levels,
                                        struct MixlabChart **out);

/**
 * # Safety
 * `chart` must come from [`mixlab_chart_cellular`] (or be null) and not be used afterwards.
 */
void mixlab_chart_free(struct MixlabChart *chart);

/**
 * Position `Φ(θ, level)` with `θ ∈ [0, 1)`, written to `xy[0..2]`.
 *
 * # Safety
 * `chart` must be a live handle; `xy` must hold two doubles.
 */
enum MixlabStatus mixlab_chart_eval(const struct MixlabChart *chart,
                                    double theta,
                                    double level,
                                    double *xy);

/**
 * Largest relative deviation of `|det DΦ|` from its expected value.
 *
 * # Safety
 * `chart` must be a live handle; `out` must be writable.
 */
enum MixlabStatus mixlab_chart_jacobian_error(const struct MixlabChart *chart, double *out);

/**
 * Runs the experiment in the config file at `path`. `output_dir` may be
 * null to keep the config's directory; `workers = 0` selects the default.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `output_dir` null or NUL-terminated.
 */
enum MixlabStatus mixlab_run_config(const char *path, const char *output_dir, size_t workers);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIXLAB_H */
