/* C interface to the bsde-dro solvers. Generated by cbindgen; do not edit. */

#ifndef BSDE_DRO_H
#define BSDE_DRO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every fallible function.
enum BsdeDroStatus
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  BSDE_DRO_STATUS_OK = 0,
  BSDE_DRO_STATUS_INVALID_ARGUMENT = 1,
  BSDE_DRO_STATUS_INVALID_STATE = 2,
  BSDE_DRO_STATUS_NUMERIC_FAILURE = 3,
  BSDE_DRO_STATUS_REGRESSION_FAILURE = 4,
  BSDE_DRO_STATUS_ASSUMPTION_VIOLATION = 5,
  BSDE_DRO_STATUS_CONFIG_ERROR = 6,
  BSDE_DRO_STATUS_IO_ERROR = 7,
  BSDE_DRO_STATUS_NULL_POINTER = 8,
  BSDE_DRO_STATUS_INVALID_UTF8 = 9,
  BSDE_DRO_STATUS_PANIC = 10,
};
#ifndef __cplusplus
typedef int32_t BsdeDroStatus;
#endif // __cplusplus

// Terminal payoff selector for the built-in problems.
enum BsdeDroTerminal
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  // Constant payoff; `terminal_param` is the constant.
  BSDE_DRO_TERMINAL_CONSTANT = 0,
  // First coordinate of the path at the horizon; `terminal_param` unused.
  BSDE_DRO_TERMINAL_TERMINAL_VALUE = 1,
};
#ifndef __cplusplus
typedef int32_t BsdeDroTerminal;
#endif // __cplusplus

// Opaque regression basis handle.
typedef struct BsdeDroBasis BsdeDroBasis;

// Opaque Brownian ensemble handle.
typedef struct BsdeDroEnsemble BsdeDroEnsemble;

// A point estimate with its Monte-Carlo standard error.
typedef struct BsdeDroEstimate {
  double value;
  double std_error;
} BsdeDroEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copy the last error message of this thread into `buf` (NUL-terminated,
// truncated to `cap`). Returns the full message length in bytes, excluding
// the terminator; call with `cap = 0` to query the length.
//
// # Safety
// `buf` must point to `cap` writable bytes, or be null when `cap` is 0.
uintptr_t bsde_dro_last_error(char *buf, uintptr_t cap);

// Create a Brownian ensemble; identical arguments produce bit-identical
// paths regardless of thread counts.
//
// # Safety
// `out` must be a valid pointer; on success it receives an owned handle
// that must be released with `bsde_dro_ensemble_free`.
BsdeDroStatus bsde_dro_ensemble_create(double horizon,
                                       uintptr_t n_steps,
                                       uintptr_t dim,
                                       uintptr_t n_paths,
                                       uint64_t seed,
                                       struct BsdeDroEnsemble **out);

// Release an ensemble handle. Null is a no-op.
//
// # Safety
// `ens` must be a handle from `bsde_dro_ensemble_create`, not yet freed.
void bsde_dro_ensemble_free(struct BsdeDroEnsemble *ens);

// Number of simulated paths in the ensemble; 0 when the handle is null.
//
// # Safety
// `ens` must be a live handle or null.
uintptr_t bsde_dro_ensemble_n_paths(const struct BsdeDroEnsemble *ens);

// Create a polynomial regression basis of the given total degree.
//
// # Safety
// `out` must be a valid pointer; on success it receives an owned handle
// that must be released with `bsde_dro_basis_free`.
BsdeDroStatus bsde_dro_basis_create(uintptr_t degree, struct BsdeDroBasis **out);

// Release a basis handle. Null is a no-op.
//
// # Safety
// `basis` must be a handle from `bsde_dro_basis_create`, not yet freed.
void bsde_dro_basis_free(struct BsdeDroBasis *basis);

// Solve the linear-driver BSDE `dY = Z dX - (a Y + b . Z) dt` with the
// selected terminal payoff, writing the time-0 value into `out`.
//
// # Safety
// `ens` and `basis` must be live handles, `drift_b` must point to
// `drift_len` doubles (or be null with `drift_len = 0` for no `z` term),
// and `out` must be valid.
BsdeDroStatus bsde_dro_solve_linear_bsde(const struct BsdeDroEnsemble *ens,
                                         const struct BsdeDroBasis *basis,
                                         double gen_a,
                                         const double *drift_b,
                                         uintptr_t drift_len,
                                         BsdeDroTerminal terminal,
                                         double terminal_param,
                                         struct BsdeDroEstimate *out);

// First-order L-infinity drift sensitivity of the linear-driver BSDE.
//
// # Safety
// Same contract as `bsde_dro_solve_linear_bsde`.
BsdeDroStatus bsde_dro_sensitivity_linf(const struct BsdeDroEnsemble *ens,
                                        const struct BsdeDroBasis *basis,
                                        double gen_a,
                                        const double *drift_b,
                                        uintptr_t drift_len,
                                        BsdeDroTerminal terminal,
                                        double terminal_param,
                                        struct BsdeDroEstimate *out);

// First-order L2 drift sensitivity of the terminal payoff under the trivial
// (uncontrolled) coefficients.
//
// # Safety
// `ens` and `basis` must be live handles, `out` must be valid.
BsdeDroStatus bsde_dro_sensitivity_l2(const struct BsdeDroEnsemble *ens,
                                      const struct BsdeDroBasis *basis,
                                      BsdeDroTerminal terminal,
                                      double terminal_param,
                                      struct BsdeDroEstimate *out);

// Run a full JSON experiment config and return the result rows as a CSV
// string (owned by the caller; release with `bsde_dro_string_free`).
//
// # Safety
// `config_json` must be a NUL-terminated string and `out_csv` a valid
// pointer.
BsdeDroStatus bsde_dro_run_config(const char *config_json, char **out_csv);

// Release a string returned by this library. Null is a no-op.
//
// # Safety
// `s` must come from a function of this library, not yet freed.
void bsde_dro_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BSDE_DRO_H */
