#ifndef RVAE_H
#define RVAE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RvaeStatus {
  RVAE_STATUS_OK = 0,
  RVAE_STATUS_NULL_POINTER = 1,
  RVAE_STATUS_INVALID_ARGUMENT = 2,
  RVAE_STATUS_DIMENSION_MISMATCH = 3,
  RVAE_STATUS_NUMERICAL = 4,
  RVAE_STATUS_FORMAT = 5,
  RVAE_STATUS_IO = 6,
  RVAE_STATUS_CONFIG = 7,
  RVAE_STATUS_PANIC = 8,
} RvaeStatus;

typedef enum RvaeMode {
  RVAE_MODE_RIEMANNIAN = 0,
  RVAE_MODE_EUCLIDEAN_BASELINE = 1,
} RvaeMode;

/**
 * Opaque model handle.
 */
typedef struct RvaeHandle RvaeHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. Valid
 * until the next failing call on the same thread.
 */
const char *rvae_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rvae_version(void);

/**
 * Loads a checkpoint. On success `*out` owns a handle to release with
 * [`rvae_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RvaeStatus rvae_model_load(const char *path, struct RvaeHandle **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `h` must come from [`rvae_model_load`] and not be used afterwards.
 */
void rvae_model_free(struct RvaeHandle *h);

/**
 * # Safety
 * `h` must be a live handle and the output pointers valid.
 */
enum RvaeStatus rvae_model_dims(const struct RvaeHandle *h,
                                size_t *data_dim,
                                size_t *latent_dim,
                                enum RvaeMode *mode);

/**
 * Encoder mean of one input of length `data_dim`.
 *
 * # Safety
 * Buffers must hold the stated lengths.
 */
enum RvaeStatus rvae_encode(const struct RvaeHandle *h,
                            const double *x,
                            size_t x_len,
                            double *code_out,
                            size_t code_len);

/**
 * Decoder mean at a latent point.
 *
 * # Safety
 * Buffers must hold the stated lengths.
 */
enum RvaeStatus rvae_decode(const struct RvaeHandle *h,
                            const double *z,
                            size_t z_len,
                            double *x_out,
                            size_t x_len);

/**
 * Pull-back metric at `z`, row-major `d × d`, plus its log volume measure.
 *
 * # Safety
 * Buffers must hold the stated lengths; `log_volume` may be null.
 */
enum RvaeStatus rvae_metric(const struct RvaeHandle *h,
                            const double *z,
                            size_t z_len,
                            double *metric_out,
                            size_t metric_len,
                            double *log_volume);

/**
 * Length of the fitted geodesic between `a` and `b`.
 *
 * # Safety
 * Both points must hold `latent_dim` values.
 */
enum RvaeStatus rvae_geodesic_distance(const struct RvaeHandle *h,
                                       const double *a,
                                       const double *b,
                                       size_t len,
                                       size_t n_basis,
                                       size_t n_segments,
                                       size_t max_iters,
                                       double *distance);

/**
 * Log prior density at `z`: the heat kernel with respect to the volume
 * measure for a Riemannian model, the standard normal coordinate density
 * for the baseline.
 *
 * # Safety
 * `z` must hold `latent_dim` values.
 */
enum RvaeStatus rvae_prior_logpdf(const struct RvaeHandle *h,
                                  const double *z,
                                  size_t z_len,
                                  double *out);

/**
 * `n_paths` prior walk endpoints, row-major `n_paths × d`, with the learned
 * diffusion time scaled by `t_scale`. Riemannian models only.
 *
 * # Safety
 * `out` must hold `n_paths · latent_dim` values.
 */
enum RvaeStatus rvae_sample_prior(const struct RvaeHandle *h,
                                  size_t n_paths,
                                  size_t steps,
                                  double t_scale,
                                  uint64_t seed,
                                  double *out,
                                  size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RVAE_H */
