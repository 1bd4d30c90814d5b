#ifndef MSVAR_H
#define MSVAR_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MsvarInit {
  MSVAR_INIT_RANDOM = 0,
  MSVAR_INIT_KMEANS = 1,
} MsvarInit;

typedef enum MsvarStatus {
  MSVAR_STATUS_OK = 0,
  MSVAR_STATUS_NULL_POINTER = 1,
  MSVAR_STATUS_INVALID_PARAM = 2,
  MSVAR_STATUS_INVALID_INPUT = 3,
  MSVAR_STATUS_IO = 4,
  /**
   * The solver stopped early. The result handle is still filled in.
   */
  MSVAR_STATUS_NOT_CONVERGED = 5,
  MSVAR_STATUS_BUFFER_TOO_SMALL = 6,
  MSVAR_STATUS_PANIC = 7,
} MsvarStatus;

typedef enum MsvarPhantomKind {
  MSVAR_PHANTOM_KIND_TWO_PHASE = 0,
  MSVAR_PHANTOM_KIND_FOUR_PHASE = 1,
  MSVAR_PHANTOM_KIND_RAMP_BIAS = 2,
} MsvarPhantomKind;

typedef struct MsvarImage MsvarImage;

typedef struct MsvarLabels MsvarLabels;

typedef struct MsvarResult MsvarResult;

/**
 * Settings of the softmax solvers (with and without bias).
 */
typedef struct MsvarMsParams {
  double lambda;
  size_t num_classes;
  double step_size;
  size_t max_iters;
  double rel_tol;
  double tv_eps;
  uint64_t seed;
  bool line_search;
  enum MsvarInit init;
} MsvarMsParams;

typedef struct MsvarLevelSetParams {
  double lambda;
  double dt;
  double eps_h;
  size_t max_iters;
  size_t patience;
  double tv_eps;
  uint64_t seed;
} MsvarLevelSetParams;

/**
 * Overlap fields are NaN when no positive class was requested.
 */
typedef struct MsvarMetrics {
  double iou;
  double dice;
  double precision;
  double recall;
  double rc;
  double pri;
  double vi;
} MsvarMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *msvar_last_error(void);

/**
 * Static NUL-terminated version string.
 */
const char *msvar_version(void);

struct MsvarMsParams msvar_ms_params_default(void);

struct MsvarLevelSetParams msvar_levelset_params_default(void);

/**
 * Copies `height * width * channels` pixel-interleaved values into a new image.
 *
 * # Safety
 * `data` must point to that many readable doubles.
 */
enum MsvarStatus msvar_image_new(size_t height,
                                 size_t width,
                                 size_t channels,
                                 const double *data,
                                 struct MsvarImage **out);

/**
 * Reads a PGM or PPM file, scaled to [0, 1].
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum MsvarStatus msvar_image_read(const char *path, struct MsvarImage **out);

/**
 * # Safety
 * `image` must be null or a handle from this library, not yet freed.
 */
void msvar_image_free(struct MsvarImage *image);

/**
 * # Safety
 * `image` must be a live handle; the out pointers may be null.
 */
enum MsvarStatus msvar_image_shape(const struct MsvarImage *image,
                                   size_t *height,
                                   size_t *width,
                                   size_t *channels);

/**
 * # Safety
 * `labels` must point to `height * width` readable bytes.
 */
enum MsvarStatus msvar_labels_new(size_t height,
                                  size_t width,
                                  const uint8_t *labels,
                                  struct MsvarLabels **out);

/**
 * Reads an 8-bit PGM whose gray values are class indices.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum MsvarStatus msvar_labels_read(const char *path, struct MsvarLabels **out);

/**
 * # Safety
 * `labels` must be a live handle. See [`msvar_result_trace`] for the
 * buffer protocol.
 */
enum MsvarStatus msvar_labels_data(const struct MsvarLabels *labels,
                                   uint8_t *out,
                                   size_t cap,
                                   size_t *len_out);

/**
 * # Safety
 * `labels` must be null or a handle from this library, not yet freed.
 */
void msvar_labels_free(struct MsvarLabels *labels);

/**
 * Synthetic phantom of side `size`. `gt_out` may be null.
 *
 * # Safety
 * Out pointers must be writable.
 */
enum MsvarStatus msvar_phantom(enum MsvarPhantomKind kind,
                               size_t size,
                               double sigma,
                               uint64_t seed,
                               struct MsvarImage **image_out,
                               struct MsvarLabels **gt_out);

/**
 * Softmax-relaxed segmentation. `params` may be null for defaults.
 *
 * # Safety
 * `image` must be a live handle and `out` writable.
 */
enum MsvarStatus msvar_segment_ms(const struct MsvarImage *image,
                                  const struct MsvarMsParams *params,
                                  struct MsvarResult **out);

/**
 * Segmentation with a multiplicative bias field of TV weight `gamma`.
 *
 * # Safety
 * `image` must be a live handle and `out` writable.
 */
enum MsvarStatus msvar_segment_ms_bias(const struct MsvarImage *image,
                                       const struct MsvarMsParams *params,
                                       double gamma,
                                       struct MsvarResult **out);

/**
 * Multiphase level set with `phases` level functions (1 or 2).
 *
 * # Safety
 * `image` must be a live handle and `out` writable.
 */
enum MsvarStatus msvar_segment_levelset(const struct MsvarImage *image,
                                        size_t phases,
                                        const struct MsvarLevelSetParams *params,
                                        struct MsvarResult **out);

/**
 * # Safety
 * `result` must be a live handle and `out` writable.
 */
enum MsvarStatus msvar_result_labels(const struct MsvarResult *result, struct MsvarLabels **out);

/**
 * Objective trace: initial value followed by one entry per accepted step.
 *
 * Pass a null `out` to query the length through `len_out`. Otherwise `cap`
 * is the buffer capacity in elements.
 *
 * # Safety
 * `result` must be a live handle; `out` must hold `cap` elements.
 */
enum MsvarStatus msvar_result_trace(const struct MsvarResult *result,
                                    double *out,
                                    size_t cap,
                                    size_t *len_out);

/**
 * Class centroids, row-major `num_classes x channels`.
 *
 * # Safety
 * As for [`msvar_result_trace`].
 */
enum MsvarStatus msvar_result_centroids(const struct MsvarResult *result,
                                        double *out,
                                        size_t cap,
                                        size_t *len_out);

/**
 * Estimated bias field (row-major), only for `msvar_segment_ms_bias` results.
 *
 * # Safety
 * As for [`msvar_result_trace`].
 */
enum MsvarStatus msvar_result_bias(const struct MsvarResult *result,
                                   double *out,
                                   size_t cap,
                                   size_t *len_out);

/**
 * # Safety
 * `result` must be a live handle; the out pointers may be null.
 */
enum MsvarStatus msvar_result_info(const struct MsvarResult *result,
                                   size_t *iterations,
                                   bool *converged);

/**
 * # Safety
 * `result` must be null or a handle from this library, not yet freed.
 */
void msvar_result_free(struct MsvarResult *result);

/**
 * Metrics of `pred` against `gt`. A negative `positive_class` skips the
 * overlap metrics.
 *
 * # Safety
 * Both handles must be live and `out` writable.
 */
enum MsvarStatus msvar_eval(const struct MsvarLabels *pred,
                            const struct MsvarLabels *gt,
                            int32_t positive_class,
                            struct MsvarMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MSVAR_H */
