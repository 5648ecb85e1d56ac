#ifndef PARAMSAL_H
#define PARAMSAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every fallible call.
 */
typedef enum PsalStatus {
  PSAL_STATUS_OK = 0,
  PSAL_STATUS_INVALID_ARGUMENT = 1,
  PSAL_STATUS_SHAPE = 2,
  PSAL_STATUS_FORMAT = 3,
  PSAL_STATUS_EMPTY = 4,
  PSAL_STATUS_NON_FINITE = 5,
  PSAL_STATUS_MISSING_ARTIFACT = 6,
  PSAL_STATUS_IO = 7,
  PSAL_STATUS_NULL_POINTER = 8,
  PSAL_STATUS_BUFFER_TOO_SMALL = 9,
  PSAL_STATUS_PANIC = 10,
} PsalStatus;

/**
 * Neighbor pool of [`psal_index_knn`].
 */
typedef enum PsalPool {
  PSAL_POOL_ALL = 0,
  PSAL_POOL_MISCLASSIFIED = 1,
  PSAL_POOL_CORRECT = 2,
} PsalPool;

/**
 * Exact cosine-similarity index over standardized profiles.
 */
typedef struct PsalIndex PsalIndex;

/**
 * A trained model loaded from a checkpoint.
 */
typedef struct PsalModel PsalModel;

/**
 * Per-filter saliency statistics of a reference set.
 */
typedef struct PsalStats PsalStats;

/**
 * Static facts about a loaded model.
 */
typedef struct PsalModelInfo {
  size_t channels;
  size_t height;
  size_t width;
  size_t num_classes;
  size_t filter_count;
  size_t conv_layer_count;
} PsalModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *psal_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated, truncated to
 * `capacity`) and returns its full length in bytes, excluding the terminator. The message
 * is empty after a successful call.
 *
 * # Safety
 * `buf` must be null or point to `capacity` writable bytes.
 */
size_t psal_last_error_message(char *buf, size_t capacity);

/**
 * Loads a checkpoint and stores a new handle in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PsalStatus psal_model_load(const char *path_utf8, struct PsalModel **out);

/**
 * Releases a model handle; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`psal_model_load`] not yet freed.
 */
void psal_model_free(struct PsalModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum PsalStatus psal_model_info(const struct PsalModel *model, struct PsalModelInfo *out);

/**
 * Classifies one `[C, H, W]` image given in row-major order. Softmax confidences go to
 * `confidences` (at least `num_classes` entries) and the arg-max class to `*predicted`.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum PsalStatus psal_model_predict(const struct PsalModel *model,
                                   const double *pixels,
                                   size_t pixel_count,
                                   double *confidences,
                                   size_t confidence_capacity,
                                   size_t *predicted);

/**
 * Loads profile statistics written by `paramsal stats`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PsalStatus psal_stats_load(const char *path_utf8, struct PsalStats **out);

/**
 * Releases a statistics handle; null is ignored.
 *
 * # Safety
 * `stats` must be null or a handle from [`psal_stats_load`] not yet freed.
 */
void psal_stats_free(struct PsalStats *stats);

/**
 * Filter-wise saliency profile of one image under `label`, one value per filter. With a
 * null `stats` the raw profile is returned, otherwise its standardization.
 *
 * # Safety
 * `stats` may be null; other pointers must be valid for the stated lengths.
 */
enum PsalStatus psal_filter_profile(const struct PsalModel *model,
                                    const struct PsalStats *stats,
                                    const double *pixels,
                                    size_t pixel_count,
                                    size_t label,
                                    double *profile,
                                    size_t profile_capacity);

/**
 * Input-space saliency map (`H × W`, row-major) that moves the image's standardized
 * profile toward a copy with its `top_filters` most salient filters multiplied by
 * `boost`. With `postprocess` the map is thresholded and blurred.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum PsalStatus psal_input_saliency(const struct PsalModel *model,
                                    const struct PsalStats *stats,
                                    const double *pixels,
                                    size_t pixel_count,
                                    size_t label,
                                    size_t top_filters,
                                    double boost,
                                    bool postprocess,
                                    double *map,
                                    size_t map_capacity);

/**
 * Loads a profile index written by `paramsal profile`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PsalStatus psal_index_load(const char *path_utf8, struct PsalIndex **out);

/**
 * Releases an index handle; null is ignored.
 *
 * # Safety
 * `index` must be null or a handle from [`psal_index_load`] not yet freed.
 */
void psal_index_free(struct PsalIndex *index);

/**
 * Number of stored profiles, or 0 for a null handle.
 *
 * # Safety
 * `index` must be null or a live handle.
 */
size_t psal_index_len(const struct PsalIndex *index);

/**
 * The `k` stored samples most similar to `sample_id` (excluding itself) within `pool`,
 * optionally restricted to conv layers `first_layer..=last_layer`. Ids and similarities
 * are written in rank order and their number to `*count`, which is below `k` when the
 * pool is smaller.
 *
 * # Safety
 * Pointers must be valid for `capacity` entries.
 */
enum PsalStatus psal_index_knn(const struct PsalIndex *index,
                               size_t sample_id,
                               size_t k,
                               enum PsalPool pool,
                               bool restrict_layers,
                               size_t first_layer,
                               size_t last_layer,
                               size_t *ids,
                               double *similarities,
                               size_t capacity,
                               size_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PARAMSAL_H */
