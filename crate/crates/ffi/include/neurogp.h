#ifndef NEUROGP_H
#define NEUROGP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum NgStatus {
  NG_STATUS_OK = 0,
  NG_STATUS_NULL_ARGUMENT = 1,
  NG_STATUS_INVALID_ARGUMENT = 2,
  NG_STATUS_IO = 3,
  NG_STATUS_CONFIG = 4,
  NG_STATUS_NUMERICAL = 5,
  NG_STATUS_UNKNOWN_REFERENCE = 6,
  NG_STATUS_PANIC = 7,
} NgStatus;

/**
 * Cognitive score predicted by a model.
 */
typedef enum NgTarget {
  NG_TARGET_MMSE = 0,
  NG_TARGET_ADAS13 = 1,
  NG_TARGET_CDRSB = 2,
} NgTarget;

/**
 * A patient cohort.
 */
typedef struct NgCohort NgCohort;

/**
 * A trained model, conditioned and ready to predict.
 */
typedef struct NgModel NgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes, excluding
 * the terminator; 0 when the last call succeeded.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t ng_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ng_version(void);

/**
 * Simulates a cohort. `config_json` may be null for the default simulator
 * settings, or a JSON object overriding some of them.
 *
 * # Safety
 * `config_json` must be null or a valid C string; `out` must be writable.
 */
enum NgStatus ng_cohort_simulate(const char *config_json, uint64_t seed, struct NgCohort **out);

/**
 * Loads a long-format cohort CSV.
 *
 * # Safety
 * `path` must be a valid C string; `out` must be writable.
 */
enum NgStatus ng_cohort_load_csv(const char *path, struct NgCohort **out);

/**
 * Writes a cohort as long-format CSV.
 *
 * # Safety
 * `cohort` must come from this library; `path` must be a valid C string.
 */
enum NgStatus ng_cohort_save_csv(const struct NgCohort *cohort, const char *path);

/**
 * Number of patients in the cohort.
 *
 * # Safety
 * `cohort` must come from this library; `out` must be writable.
 */
enum NgStatus ng_cohort_num_patients(const struct NgCohort *cohort, size_t *out);

/**
 * Releases a cohort; null is ignored.
 *
 * # Safety
 * `cohort` must be null or come from this library and not be used afterwards.
 */
void ng_cohort_free(struct NgCohort *cohort);

/**
 * Trains one model per score on the cohort with a 12-month horizon.
 * `spec` is a preset name (`exact_gp`, `dkl`, `pp_dkl`, `pp_dkl_prime`) or a
 * JSON model specification; null selects `pp_dkl`.
 *
 * # Safety
 * `cohort` must come from this library; `spec` must be null or a valid C
 * string; `out` must be writable.
 */
enum NgStatus ng_model_train(const struct NgCohort *cohort,
                             const char *spec,
                             uint64_t seed,
                             struct NgModel **out);

/**
 * Loads a model file written by [`ng_model_save`] or the command-line tool.
 *
 * # Safety
 * `path` must be a valid C string; `out` must be writable.
 */
enum NgStatus ng_model_load(const char *path, struct NgModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be a valid C string.
 */
enum NgStatus ng_model_save(const struct NgModel *model, const char *path);

/**
 * Predicts one score for a cohort patient at `n` times, given in months
 * after the patient's last visit. Writes `n` means and `n` latent variances.
 *
 * # Safety
 * `model` and `cohort` must come from this library; `patient_id` must be a
 * valid C string; `offsets`, `mean_out` and `var_out` must hold `n` values.
 */
enum NgStatus ng_model_predict(const struct NgModel *model,
                               const struct NgCohort *cohort,
                               const char *patient_id,
                               enum NgTarget target,
                               const double *offsets,
                               size_t n,
                               double *mean_out,
                               double *var_out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must be null or come from this library and not be used afterwards.
 */
void ng_model_free(struct NgModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NEUROGP_H */
