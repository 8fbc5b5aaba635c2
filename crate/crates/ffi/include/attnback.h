#ifndef ATTNBACK_H
#define ATTNBACK_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AtbStatus {
  ATB_STATUS_OK = 0,
  ATB_STATUS_NULL_POINTER = 1,
  ATB_STATUS_INVALID_ARGUMENT = 2,
  ATB_STATUS_SHAPE = 3,
  ATB_STATUS_DEGENERATE = 4,
  ATB_STATUS_NON_FINITE = 5,
  ATB_STATUS_INSUFFICIENT_DATA = 6,
  ATB_STATUS_FORMAT = 7,
  ATB_STATUS_PARSE = 8,
  ATB_STATUS_IO = 9,
  ATB_STATUS_INTERNAL = 10,
} AtbStatus;

/**
 * How several enrollment vectors are combined by the PLDA scorer.
 */
typedef enum AtbPldaMode {
  ATB_PLDA_MODE_MEAN = 0,
  ATB_PLDA_MODE_CONCAT = 1,
} AtbPldaMode;

/**
 * Trained attention back-end.
 */
typedef struct AtbAttentionModel AtbAttentionModel;

/**
 * Trained PLDA model with its preprocessing.
 */
typedef struct AtbPldaModel AtbPldaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library from the same thread.
 */
const char *atb_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *atb_version(void);

/**
 * Loads an attention back-end from a parameter file or a training checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AtbStatus atb_attention_load(const char *path, struct AtbAttentionModel **out);

/**
 * # Safety
 * `model` must come from [`atb_attention_load`] and not be used afterwards.
 */
void atb_attention_free(struct AtbAttentionModel *model);

/**
 * Embedding dimension expected by the model, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t atb_attention_dim(const struct AtbAttentionModel *model);

/**
 * Scores one trial. `enroll` is row-major `n_enroll x dim`, `test` has `dim`
 * values. Writes a probability in (0, 1).
 *
 * # Safety
 * All pointers must be valid for the given lengths.
 */
enum AtbStatus atb_attention_score(const struct AtbAttentionModel *model,
                                   const double *enroll,
                                   size_t n_enroll,
                                   const double *test,
                                   size_t dim,
                                   double *out_score);

/**
 * Loads a PLDA model file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AtbStatus atb_plda_load(const char *path, struct AtbPldaModel **out);

/**
 * # Safety
 * `model` must come from [`atb_plda_load`] and not be used afterwards.
 */
void atb_plda_free(struct AtbPldaModel *model);

/**
 * Raw embedding dimension accepted before preprocessing, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t atb_plda_dim(const struct AtbPldaModel *model);

/**
 * PLDA verification score for one trial, same layout as
 * [`atb_attention_score`].
 *
 * # Safety
 * All pointers must be valid for the given lengths.
 */
enum AtbStatus atb_plda_score(const struct AtbPldaModel *model,
                              const double *enroll,
                              size_t n_enroll,
                              const double *test,
                              size_t dim,
                              enum AtbPldaMode mode,
                              double *out_score);

/**
 * Cosine similarity of two `dim`-vectors.
 *
 * # Safety
 * `a` and `b` must hold `dim` values, `out_score` must be valid.
 */
enum AtbStatus atb_cosine_score(const double *a, const double *b, size_t dim, double *out_score);

/**
 * Equal error rate of `n` scores. `is_target[i]` is nonzero for target trials.
 * `out_threshold` may be null.
 *
 * # Safety
 * `scores` and `is_target` must hold `n` values.
 */
enum AtbStatus atb_eer(const double *scores,
                       const uint8_t *is_target,
                       size_t n,
                       double *out_eer,
                       double *out_threshold);

/**
 * Minimum normalized detection cost. `out_threshold` may be null.
 *
 * # Safety
 * `scores` and `is_target` must hold `n` values.
 */
enum AtbStatus atb_min_dcf(const double *scores,
                           const uint8_t *is_target,
                           size_t n,
                           double p_target,
                           double c_miss,
                           double c_fa,
                           double *out_dcf,
                           double *out_threshold);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATTNBACK_H */
