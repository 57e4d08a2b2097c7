#ifndef VARMAP_H
#define VARMAP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Which estimate vector to copy out of a report.
 */
typedef enum VmEstimate {
  InitialPoint = 0,
  SmootherMap = 1,
  FilterEstimate = 2,
} VmEstimate;

/**
 * Hessian mode selector (Auto picks dense below 64 dimensions).
 */
typedef enum VmHessian {
  Auto = 0,
  Dense = 1,
  MatrixFree = 2,
} VmHessian;

/**
 * Observation scenario selector.
 */
typedef enum VmScenario {
  HalfBlocks = 0,
  First3 = 1,
  FullState = 2,
} VmScenario;

/**
 * Status code of every fallible call.
 */
typedef enum VmStatus {
  Ok = 0,
  NullPointer = 1,
  InvalidDimension = 2,
  OutOfBall = 3,
  NumericalError = 4,
  DegenerateInput = 5,
  InsufficientData = 6,
  ConfigurationError = 7,
  NoConvergence = 8,
  OptimizationFailure = 9,
  BufferTooSmall = 10,
  Panic = 11,
} VmStatus;

/**
 * Opaque observation-record handle; carries the geometry it was generated
 * with so a smoothing call needs no further setup.
 */
typedef struct VmRecord VmRecord;

/**
 * Opaque smoothing-report handle.
 */
typedef struct VmReport VmReport;

/**
 * Opaque dynamical system handle.
 */
typedef struct VmSystem VmSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Human-readable description of a status code (static storage).
 */
const char *vm_status_message(enum VmStatus status);

/**
 * Create a Lorenz 96' system with the given dimension and forcing.
 *
 * # Safety
 * `out` must point to writable storage for one pointer.
 */
enum VmStatus vm_system_lorenz96(uintptr_t dim, double forcing, struct VmSystem **out);

/**
 * # Safety
 * `sys` must be a pointer returned by a vm_system constructor, or null.
 */
void vm_system_free(struct VmSystem *sys);

/**
 * # Safety
 * `sys` must be a valid system handle.
 */
uintptr_t vm_system_dim(const struct VmSystem *sys);

/**
 * # Safety
 * `sys` must be a valid system handle.
 */
double vm_system_radius(const struct VmSystem *sys);

/**
 * Generate k+1 noisy observations of the system started at `u0`
 * (null for the standard ramp initial condition), deterministic in `seed`.
 *
 * # Safety
 * `sys` must be a valid system handle; `u0` is either null or a pointer to
 * `dim` doubles; `out` must point to writable storage for one pointer.
 */
enum VmStatus vm_observations_generate(const struct VmSystem *sys,
                                       enum VmScenario scenario,
                                       double sigma_z,
                                       double h,
                                       uintptr_t k,
                                       const double *u0,
                                       uint64_t seed,
                                       struct VmRecord **out);

/**
 * # Safety
 * `rec` must be a record handle or null.
 */
void vm_record_free(struct VmRecord *rec);

/**
 * Number of observation rows (k + 1).
 *
 * # Safety
 * `rec` must be a valid record handle.
 */
uintptr_t vm_record_rows(const struct VmRecord *rec);

/**
 * Observed dimension d_o.
 *
 * # Safety
 * `rec` must be a valid record handle.
 */
uintptr_t vm_record_dim_obs(const struct VmRecord *rec);

/**
 * Copy observation row `i` into `buf` (length `len >= d_o`).
 *
 * # Safety
 * `rec` must be a valid record handle and `buf` writable for `len` doubles.
 */
enum VmStatus vm_record_copy_row(const struct VmRecord *rec,
                                 uintptr_t i,
                                 double *buf,
                                 uintptr_t len);

/**
 * Run the optimisation-based smoother on a record; on success returns a
 * report handle carrying the initial estimate, the MAP, and the push-forward
 * filter estimate.
 *
 * # Safety
 * `sys` and `rec` must be valid handles; `out` must point to writable
 * storage for one pointer.
 */
enum VmStatus vm_smooth(const struct VmSystem *sys,
                        const struct VmRecord *rec,
                        enum VmHessian hessian,
                        struct VmReport **out);

/**
 * # Safety
 * `rep` must be a report handle or null.
 */
void vm_report_free(struct VmReport *rep);

/**
 * # Safety
 * `rep` must be a valid report handle.
 */
uintptr_t vm_report_dim(const struct VmReport *rep);

/**
 * Newton iterations performed.
 *
 * # Safety
 * `rep` must be a valid report handle.
 */
uintptr_t vm_report_iterations(const struct VmReport *rep);

/**
 * 1 when the Newton iteration converged, 0 otherwise.
 *
 * # Safety
 * `rep` must be a valid report handle.
 */
int32_t vm_report_converged(const struct VmReport *rep);

/**
 * RMSE against the stored truth; NaN when no truth was kept.
 *
 * # Safety
 * `rep` must be a valid report handle.
 */
double vm_report_rmse(const struct VmReport *rep);

/**
 * Copy an estimate vector into `buf` (length `len >= dim`).
 *
 * # Safety
 * `rep` must be a valid report handle and `buf` writable for `len` doubles.
 */
enum VmStatus vm_report_copy(const struct VmReport *rep,
                             enum VmEstimate which,
                             double *buf,
                             uintptr_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VARMAP_H */
