#ifndef DAGI_H
#define DAGI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum DagiStatus {
  DAGI_STATUS_OK = 0,
  DAGI_STATUS_NULL_POINTER = 1,
  DAGI_STATUS_INVALID_ARGUMENT = 2,
  DAGI_STATUS_IO = 3,
  DAGI_STATUS_CHECKPOINT = 4,
  DAGI_STATUS_SCHEMA = 5,
  DAGI_STATUS_UNSUPPORTED = 6,
  DAGI_STATUS_BUFFER_TOO_SMALL = 7,
  DAGI_STATUS_RUNTIME = 8,
  DAGI_STATUS_PANIC = 9,
} DagiStatus;

/**
 * A loaded checkpoint of any method.
 */
typedef struct DagiModel DagiModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dagi_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *dagi_last_error(void);

/**
 * Loads a checkpoint written by `dagi train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DagiStatus dagi_model_load(const char *path, struct DagiModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from `dagi_model_load` and not be used afterwards.
 */
void dagi_model_free(struct DagiModel *model);

/**
 * ROI count `v`, shared measurement count `p`, target count `q`. Any
 * output pointer may be null.
 *
 * # Safety
 * `model` must be a live handle; non-null outputs must be writable.
 */
enum DagiStatus dagi_model_dims(const struct DagiModel *model, size_t *v, size_t *p, size_t *q);

/**
 * Name of ROI `index`, or null when out of range. Owned by the handle.
 *
 * # Safety
 * `model` must be a live handle.
 */
const char *dagi_model_roi_name(const struct DagiModel *model, size_t index);

/**
 * Name of target measurement `index`, or null when out of range.
 *
 * # Safety
 * `model` must be a live handle.
 */
const char *dagi_model_target_name(const struct DagiModel *model, size_t index);

/**
 * 1 if the model carries a trained label classifier, else 0.
 *
 * # Safety
 * `model` must be a live handle.
 */
int32_t dagi_model_has_classifier(const struct DagiModel *model);

/**
 * Imputes one subject. `shared` holds `v * p` values; `out` receives
 * `v * q` values and must have room for `out_len >= v * q`.
 *
 * # Safety
 * `model` must be a live handle; the buffers must be valid for the given
 * lengths.
 */
enum DagiStatus dagi_model_impute(const struct DagiModel *model,
                                  const double *shared,
                                  size_t shared_len,
                                  double *out,
                                  size_t out_len);

/**
 * Probability of label 1 for one subject; models without a classifier
 * return `Unsupported`.
 *
 * # Safety
 * `model` must be a live handle; `shared` must hold `shared_len` values and
 * `prob` must be writable.
 */
enum DagiStatus dagi_model_label_probability(const struct DagiModel *model,
                                             const double *shared,
                                             size_t shared_len,
                                             double *prob);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DAGI_H */
