#ifndef SGADV_H
#define SGADV_H

/* Generated by cbindgen from the sgadv-capi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible C-ABI call.
 */
typedef enum SgadvStatus {
  SGADV_STATUS_OK = 0,
  SGADV_STATUS_NULL_POINTER = 1,
  SGADV_STATUS_INVALID_ARGUMENT = 2,
  SGADV_STATUS_DIMENSION_MISMATCH = 3,
  SGADV_STATUS_IO = 4,
  SGADV_STATUS_INTERNAL = 5,
} SgadvStatus;

/**
 * Attack technique selector for [`sgadv_attack_run`].
 */
typedef enum SgadvTechnique {
  SGADV_TECHNIQUE_FGSM_CBCE = 0,
  SGADV_TECHNIQUE_PGD_CBCE = 1,
  SGADV_TECHNIQUE_SGADV = 2,
} SgadvTechnique;

/**
 * Opaque image handle.
 */
typedef struct SgadvImage SgadvImage;

/**
 * Opaque embedding-model handle.
 */
typedef struct SgadvModel SgadvModel;

/**
 * Attack outcome scalars; the adversarial image is returned as a handle.
 */
typedef struct SgadvAttackOutcome {
  /**
   * Iterations executed.
   */
  uintptr_t steps_taken;
  /**
   * Dissimilarity between the adversarial embedding and the target
   * template at termination.
   */
  double final_dissimilarity;
  /**
   * Lowest loss observed along the trace.
   */
  double best_loss;
  /**
   * Step index of the lowest loss.
   */
  uintptr_t best_step;
} SgadvAttackOutcome;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the most recent error message for the calling thread into `buf`
 * (NUL-terminated, truncated to `len` bytes) and returns the full message
 * length including the terminator. A return of 0 means no error has been
 * recorded. `buf` may be null when `len` is 0.
 */
uintptr_t sgadv_last_error(char *buf, uintptr_t len);

/**
 * Creates a seeded reference embedder. `width * height * channels` pixels,
 * embedding dimension `feature_dim`.
 */
enum SgadvStatus sgadv_model_new(uintptr_t width,
                                 uintptr_t height,
                                 uintptr_t channels,
                                 uintptr_t feature_dim,
                                 uint64_t seed,
                                 struct SgadvModel **out);

/**
 * Destroys a model handle; null is a no-op.
 */
void sgadv_model_free(struct SgadvModel *model);

/**
 * Embedding dimension of the model.
 */
uintptr_t sgadv_model_feature_dim(const struct SgadvModel *model);

/**
 * Creates an image from `len = width * height * channels` pixels in [0, 1].
 */
enum SgadvStatus sgadv_image_new(uintptr_t width,
                                 uintptr_t height,
                                 uintptr_t channels,
                                 const double *pixels,
                                 uintptr_t len,
                                 struct SgadvImage **out);

/**
 * Destroys an image handle; null is a no-op.
 */
void sgadv_image_free(struct SgadvImage *image);

/**
 * Pixel count of the image.
 */
uintptr_t sgadv_image_len(const struct SgadvImage *image);

/**
 * Copies the image's pixels into `buf` (`len` must equal
 * [`sgadv_image_len`]).
 */
enum SgadvStatus sgadv_image_copy_pixels(const struct SgadvImage *image,
                                         double *buf,
                                         uintptr_t len);

/**
 * Embeds `image` and writes the unit-norm feature vector into `buf`
 * (`len` must equal the model's feature dimension).
 */
enum SgadvStatus sgadv_embed(const struct SgadvModel *model,
                             const struct SgadvImage *image,
                             double *buf,
                             uintptr_t len);

/**
 * Normalized cosine dissimilarity in [0, 1] between the embeddings of two
 * images under `model`.
 */
enum SgadvStatus sgadv_dissimilarity(const struct SgadvModel *model,
                                     const struct SgadvImage *a,
                                     const struct SgadvImage *b,
                                     double *out);

/**
 * Runs one targeted attack of `source` toward `target` under `model`.
 *
 * `cbce_tau` is the decision threshold for the C-BCE objective and is
 * ignored by `SGADV_TECHNIQUE_SGADV`. On success `*out_adversarial` holds a
 * new image handle the caller must free with [`sgadv_image_free`], and
 * `*outcome` holds the scalar results.
 */
enum SgadvStatus sgadv_attack_run(const struct SgadvModel *model,
                                  const struct SgadvImage *source,
                                  const struct SgadvImage *target,
                                  enum SgadvTechnique technique,
                                  double epsilon,
                                  double alpha,
                                  uintptr_t t_max,
                                  double tau_conv,
                                  uint64_t seed,
                                  double cbce_tau,
                                  struct SgadvImage **out_adversarial,
                                  struct SgadvAttackOutcome *outcome);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SGADV_H */
