#ifndef DCTNET_H
#define DCTNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum DctStatus {
  DCT_STATUS_OK = 0,
  DCT_STATUS_NULL_POINTER = 1,
  /**
   * A string argument is not valid UTF-8 or a length is inconsistent.
   */
  DCT_STATUS_INVALID_ARGUMENT = 2,
  DCT_STATUS_CONFIG = 3,
  DCT_STATUS_DATA = 4,
  DCT_STATUS_CHECKPOINT = 5,
  DCT_STATUS_IO = 6,
  /**
   * Internal failure, including caught panics.
   */
  DCT_STATUS_INTERNAL = 7,
} DctStatus;

/**
 * Opaque model handle.
 */
typedef struct DctModel DctModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint file. On success `*out` owns a handle that must be
 * released with [`dct_model_free`].
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum DctStatus dct_model_load(const char *path, struct DctModel **out);

/**
 * Builds a freshly initialised model from a JSON model config. Fields
 * left out take their defaults; the `seed` field controls initialisation.
 *
 * # Safety
 * `json` must be a nul-terminated string and `out` a valid pointer.
 */
enum DctStatus dct_model_from_config_json(const char *json, struct DctModel **out);

/**
 * Writes the model to a checkpoint file.
 *
 * # Safety
 * `model` must come from this library and `path` be nul-terminated.
 */
enum DctStatus dct_model_save(const struct DctModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void dct_model_free(struct DctModel *model);

/**
 * Reports the input length, horizon and channel count. Any output
 * pointer may be null.
 *
 * # Safety
 * `model` must come from this library; non-null outputs must be valid.
 */
enum DctStatus dct_model_dims(const struct DctModel *model,
                              size_t *seq_len,
                              size_t *pred_len,
                              size_t *channels);

/**
 * Forecasts `batch` windows. `input` holds `batch * seq_len * channels`
 * row-major values `[batch][step][channel]`; `output` receives
 * `batch * pred_len * channels` values in the same layout. When the
 * checkpoint carries normalisation statistics, input and output are in
 * the original data scale.
 *
 * # Safety
 * `input` and `output` must point to at least `input_len` and
 * `output_len` doubles.
 */
enum DctStatus dct_model_forecast(const struct DctModel *model,
                                  size_t batch,
                                  const double *input,
                                  size_t input_len,
                                  double *output,
                                  size_t output_len);

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next library call on the same thread.
 */
const char *dct_last_error(void);

/**
 * Library version as a static string.
 */
const char *dct_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DCTNET_H */
