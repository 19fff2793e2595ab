#ifndef SAVAE_H
#define SAVAE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum SavaeStatus {
  SAVAE_STATUS_OK = 0,
  SAVAE_STATUS_NULL_POINTER = 1,
  SAVAE_STATUS_INVALID_PARAM = 2,
  SAVAE_STATUS_SHAPE = 3,
  SAVAE_STATUS_IO = 4,
  SAVAE_STATUS_FORMAT = 5,
  SAVAE_STATUS_DATA = 6,
  SAVAE_STATUS_NON_FINITE = 7,
  SAVAE_STATUS_AUTODIFF = 8,
  SAVAE_STATUS_CONFIG = 9,
  SAVAE_STATUS_BUFFER_TOO_SMALL = 10,
  SAVAE_STATUS_PANIC = 11,
} SavaeStatus;

/**
 * Opaque model handle. Create with [`savae_model_load`], release with
 * [`savae_model_free`]. A handle may be shared across threads for reading.
 */
typedef struct SavaeModel SavaeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *savae_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call on the same thread.
 */
const char *savae_last_error(void);

/**
 * Load generator weights from a checkpoint. `ema` nonzero selects the EMA
 * weights.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_model` must be writable.
 */
enum SavaeStatus savae_model_load(const char *path, int32_t ema, struct SavaeModel **out_model);

/**
 * Release a handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`savae_model_load`] and not be used afterwards.
 */
void savae_model_free(struct SavaeModel *model);

/**
 * Latent dimension `D`.
 *
 * # Safety
 * `model` must be a live handle; `out_dim` writable.
 */
enum SavaeStatus savae_latent_dim(const struct SavaeModel *model, size_t *out_dim);

/**
 * Sample rate the model expects.
 *
 * # Safety
 * `model` must be a live handle; `out_rate` writable.
 */
enum SavaeStatus savae_sample_rate(const struct SavaeModel *model, uint32_t *out_rate);

/**
 * Number of latent frames `M` produced for `n_samples` of audio.
 *
 * # Safety
 * `model` must be a live handle; `out_frames` writable.
 */
enum SavaeStatus savae_latent_frames(const struct SavaeModel *model,
                                     size_t n_samples,
                                     size_t *out_frames);

/**
 * Encode mono audio to the posterior mean, written `D×M` row-major into
 * `mu` (capacity `mu_cap` floats). `out_frames` receives `M`.
 *
 * # Safety
 * `samples` must hold `n_samples` floats and `mu` `mu_cap` floats.
 */
enum SavaeStatus savae_encode(const struct SavaeModel *model,
                              const float *samples,
                              size_t n_samples,
                              float *mu,
                              size_t mu_cap,
                              size_t *out_frames);

/**
 * Decode a `D×M` row-major latent to `n_out` samples. `n_out` may not
 * exceed `8·M·hop`.
 *
 * # Safety
 * `z` must hold `D·frames` floats and `audio` `n_out` floats.
 */
enum SavaeStatus savae_decode(const struct SavaeModel *model,
                              const float *z,
                              size_t frames,
                              float *audio,
                              size_t n_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAVAE_H */
