#ifndef STYLEFUSE_H
#define STYLEFUSE_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result codes.
 */
typedef enum SfStatus {
  SF_STATUS_OK = 0,
  SF_STATUS_NULL_POINTER = 1,
  SF_STATUS_INVALID_ARGUMENT = 2,
  SF_STATUS_NOT_FOUND = 3,
  SF_STATUS_IO = 4,
  SF_STATUS_INTEGRITY = 5,
  SF_STATUS_INCOMPATIBLE_VERSION = 6,
  SF_STATUS_NUMERICAL = 7,
  SF_STATUS_INTERNAL = 8,
  SF_STATUS_PANIC = 9,
} SfStatus;

/**
 * Opaque model handle.
 */
typedef struct SfModel SfModel;

/**
 * Stylization controls. `weights` points to `n_weights` values in [0, 1];
 * `n_weights` is either 1 (broadcast) or the layer count.
 */
typedef struct SfStylizeParams {
  const double *weights;
  size_t n_weights;
  double sigma;
  /**
   * When false the checkpoint's configured gate is used.
   */
  bool override_gamma1;
  double gamma1;
  bool override_gamma2;
  double gamma2;
  /**
   * Negative means the principal direction.
   */
  int64_t direction_rank;
} SfStylizeParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next `sf_` call on the same thread.
 */
const char *sf_last_error_message(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum SfStatus sf_model_load(const char *path, struct SfModel **out);

/**
 * Releases a handle from `sf_model_load`. NULL is ignored.
 *
 * # Safety
 * `model` must come from `sf_model_load` and not be used afterwards.
 */
void sf_model_free(struct SfModel *model);

/**
 * Image side length in pixels, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t sf_model_resolution(const struct SfModel *model);

/**
 * Number of synthesis layers (length of the weight vector), or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t sf_model_layers(const struct SfModel *model);

/**
 * Latent dimension, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t sf_model_latent_dim(const struct SfModel *model);

/**
 * Stylizes an interleaved RGB8 image of `resolution^2 * 3` bytes into
 * `out_rgb`, which must hold as many. `style_rgb` may be NULL to take the
 * extrinsic style from the content image.
 *
 * # Safety
 * Buffers must be valid for the stated lengths; `params` must be readable.
 */
enum SfStatus sf_stylize(const struct SfModel *model,
                         const uint8_t *content_rgb,
                         const uint8_t *style_rgb,
                         size_t len,
                         const struct SfStylizeParams *params,
                         uint8_t *out_rgb,
                         size_t out_len);

/**
 * Writes the top `top` directions: eigenvalues into `values[top]` and unit
 * vectors, one per row, into `vectors[top * latent_dim]`.
 *
 * # Safety
 * Output buffers must be writable for the stated lengths.
 */
enum SfStatus sf_factorize(const struct SfModel *model,
                           size_t top,
                           double *values,
                           double *vectors,
                           size_t vectors_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STYLEFUSE_H */
