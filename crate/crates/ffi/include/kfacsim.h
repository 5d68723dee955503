#ifndef KFACSIM_H
#define KFACSIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KfacsimStatus {
  KFACSIM_STATUS_OK = 0,
  KFACSIM_STATUS_NULL_POINTER = 1,
  KFACSIM_STATUS_INVALID_ARGUMENT = 2,
  KFACSIM_STATUS_CONFIG = 3,
  KFACSIM_STATUS_DIMENSION = 4,
  KFACSIM_STATUS_SINGULAR = 5,
  KFACSIM_STATUS_STATE = 6,
  KFACSIM_STATUS_CONSISTENCY = 7,
  KFACSIM_STATUS_IO = 8,
  KFACSIM_STATUS_PANIC = 9,
} KfacsimStatus;

/**
 * Opaque experiment configuration.
 */
typedef struct KfacsimConfig KfacsimConfig;

/**
 * Opaque result of one training run.
 */
typedef struct KfacsimRun KfacsimRun;

/**
 * One metrics row. Phase times follow the CSV column order.
 */
typedef struct KfacsimMetricsRow {
  uint64_t step;
  uint64_t epoch;
  double train_loss;
  double valid_accuracy;
  double sim_time;
  double phase_forward;
  double phase_backward;
  double phase_grad_allreduce;
  double phase_factor;
  double phase_eigen;
  double phase_precond;
  double phase_bcast;
  double kfac_bytes;
  uint64_t peak_overhead_bytes;
} KfacsimMetricsRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *kfacsim_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *kfacsim_version(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void kfacsim_string_free(char *s);

/**
 * Default configuration with the given seed.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum KfacsimStatus kfacsim_config_default(uint64_t seed, struct KfacsimConfig **out);

/**
 * Parses the `key = value` config format.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KfacsimStatus kfacsim_config_parse(const char *text, struct KfacsimConfig **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KfacsimStatus kfacsim_config_load(const char *path, struct KfacsimConfig **out);

/**
 * Sets one key and revalidates; the config is unchanged on failure.
 *
 * # Safety
 * `config` must be a live handle; `key` and `value` NUL-terminated strings.
 */
enum KfacsimStatus kfacsim_config_set(struct KfacsimConfig *config,
                                      const char *key,
                                      const char *value);

/**
 * Serializes the config; free the string with [`kfacsim_string_free`].
 *
 * # Safety
 * `config` must be a live handle and `out` a valid pointer.
 */
enum KfacsimStatus kfacsim_config_to_text(const struct KfacsimConfig *config, char **out);

/**
 * # Safety
 * `config` must be null or a handle not yet freed.
 */
void kfacsim_config_free(struct KfacsimConfig *config);

/**
 * Runs the configured experiment to completion.
 *
 * # Safety
 * `config` must be a live handle and `out` a valid pointer.
 */
enum KfacsimStatus kfacsim_run(const struct KfacsimConfig *config, struct KfacsimRun **out);

/**
 * Number of metric rows; 0 for a null handle.
 *
 * # Safety
 * `run` must be null or a live handle.
 */
size_t kfacsim_run_row_count(const struct KfacsimRun *run);

/**
 * # Safety
 * `run` must be a live handle and `out` a valid pointer.
 */
enum KfacsimStatus kfacsim_run_row(const struct KfacsimRun *run,
                                   size_t index,
                                   struct KfacsimMetricsRow *out);

/**
 * Steps taken when the target was first reached, or -1 if it never was.
 *
 * # Safety
 * `run` must be a live handle and `out` a valid pointer.
 */
enum KfacsimStatus kfacsim_run_steps_to_target(const struct KfacsimRun *run, int64_t *out);

/**
 * Writes the metrics CSV to `path`.
 *
 * # Safety
 * `run` must be a live handle and `path` a NUL-terminated string.
 */
enum KfacsimStatus kfacsim_run_write_csv(const struct KfacsimRun *run, const char *path);

/**
 * Summary in `key = value` form; free with [`kfacsim_string_free`].
 *
 * # Safety
 * `run` must be a live handle and `out` a valid pointer.
 */
enum KfacsimStatus kfacsim_run_summary(const struct KfacsimRun *run, char **out);

/**
 * # Safety
 * `run` must be null or a handle not yet freed.
 */
void kfacsim_run_free(struct KfacsimRun *run);

/**
 * Preconditions one layer gradient from raw factors via eigen decomposition.
 *
 * `a` is `a_dim × a_dim`, `g` is `g_dim × g_dim`, `grad` and `out` are
 * `g_dim × a_dim`, all row-major.
 *
 * # Safety
 * Every pointer must reference at least the stated number of doubles.
 */
enum KfacsimStatus kfacsim_precondition(const double *a,
                                        size_t a_dim,
                                        const double *g,
                                        size_t g_dim,
                                        const double *grad,
                                        double damping,
                                        double *out);

/**
 * Greedy longest-processing-time schedule of `n` jobs onto `workers`.
 *
 * # Safety
 * `costs` and `assignment` must hold `n` elements; `makespan` must be valid.
 */
enum KfacsimStatus kfacsim_lpt_schedule(const double *costs,
                                        size_t n,
                                        size_t workers,
                                        size_t *assignment,
                                        double *makespan);

/**
 * Rounds `n` values in place to the nearest binary16 value.
 *
 * # Safety
 * `values` must hold `n` doubles.
 */
enum KfacsimStatus kfacsim_quantize_half(double *values, size_t n);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KFACSIM_H */
