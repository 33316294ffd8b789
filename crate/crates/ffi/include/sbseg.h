#ifndef SBSEG_H
#define SBSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  SBSEG_STATUS_OK = 0,
  SBSEG_STATUS_NULL_POINTER = 1,
  SBSEG_STATUS_INVALID_ARGUMENT = 2,
  SBSEG_STATUS_SHAPE_MISMATCH = 3,
  SBSEG_STATUS_IO = 4,
  SBSEG_STATUS_FORMAT = 5,
  SBSEG_STATUS_NON_FINITE = 6,
  SBSEG_STATUS_PANIC = 7,
} SbsegStatus;

/**
 * Per-pixel class indices.
 */
typedef struct SbsegLabelMap SbsegLabelMap;

/**
 * Dense `channels × height × width` float tensor.
 */
typedef struct SbsegTensor SbsegTensor;

typedef struct {
  double sigma;
  double low_threshold;
  double high_threshold;
} SbsegCannyOptions;

typedef struct {
  double alpha;
  double lambda_s;
  double lambda1;
  double lambda2;
  double psi_eps;
  double bce_clamp;
  bool normalize;
  /**
   * Gate on the guide values instead of their derivatives.
   */
  bool guide_direct;
} SbsegLossOptions;

typedef struct {
  size_t steps;
  double step_size;
  double fidelity_mu;
  double rw_beta;
  size_t rw_iters;
  double bg_threshold;
  size_t affinity_radius;
  double affinity_sigma;
  /**
   * Projected gradient descent instead of the primal-dual solver.
   */
  bool gradient_descent;
  SbsegLossOptions loss;
} SbsegRefineOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sbseg_version(void);

/**
 * Message of the last failure on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *sbseg_last_error_message(void);

SbsegCannyOptions sbseg_canny_options_default(void);

SbsegLossOptions sbseg_loss_options_default(void);

SbsegRefineOptions sbseg_refine_options_default(void);

/**
 * Copies `channels * height * width` floats, channel-major then row-major.
 *
 * # Safety
 * `data` must point to that many floats and `out` must be writable.
 */
SbsegStatus sbseg_tensor_new(size_t channels,
                             size_t height,
                             size_t width,
                             const float *data,
                             SbsegTensor **out);

/**
 * # Safety
 * `tensor` must be NULL or a handle not yet freed.
 */
void sbseg_tensor_free(SbsegTensor *tensor);

/**
 * # Safety
 * `tensor` must be a live handle; the output pointers must be writable.
 */
SbsegStatus sbseg_tensor_shape(const SbsegTensor *tensor,
                               size_t *channels,
                               size_t *height,
                               size_t *width);

/**
 * Borrowed pointer to the tensor's values, valid until the handle is freed.
 *
 * # Safety
 * `tensor` must be a live handle and `data` writable.
 */
SbsegStatus sbseg_tensor_data(const SbsegTensor *tensor, const float **data);

/**
 * # Safety
 * `data` must point to `width * height` labels and `out` must be writable.
 */
SbsegStatus sbseg_label_map_new(size_t width,
                                size_t height,
                                const uint32_t *data,
                                SbsegLabelMap **out);

/**
 * # Safety
 * `map` must be NULL or a handle not yet freed.
 */
void sbseg_label_map_free(SbsegLabelMap *map);

/**
 * # Safety
 * `map` must be a live handle; the output pointers must be writable.
 */
SbsegStatus sbseg_label_map_shape(const SbsegLabelMap *map, size_t *width, size_t *height);

/**
 * Borrowed pointer to the labels, valid until the handle is freed.
 *
 * # Safety
 * `map` must be a live handle and `data` writable.
 */
SbsegStatus sbseg_label_map_data(const SbsegLabelMap *map, const uint32_t **data);

/**
 * Reads entry `name` of an SMT1 container; NULL `name` selects the first
 * entry.
 *
 * # Safety
 * `path` and a non-NULL `name` must be NUL-terminated; `out` must be writable.
 */
SbsegStatus sbseg_read_tensor(const char *path, const char *name, SbsegTensor **out);

/**
 * Writes `tensor` as the single entry `name` of a new SMT1 container.
 *
 * # Safety
 * `path` and `name` must be NUL-terminated; `tensor` must be a live handle.
 */
SbsegStatus sbseg_write_tensor(const char *path, const char *name, const SbsegTensor *tensor);

/**
 * Binary Canny edge map of an 8-bit grayscale image; NULL `options` uses
 * the defaults.
 *
 * # Safety
 * `gray` must point to `width * height` bytes and `out` must be writable.
 */
SbsegStatus sbseg_canny(const uint8_t *gray,
                        size_t width,
                        size_t height,
                        const SbsegCannyOptions *options,
                        SbsegTensor **out);

/**
 * # Safety
 * `labels` must be a live handle and `out` writable.
 */
SbsegStatus sbseg_label_to_boundary(const SbsegLabelMap *labels,
                                    size_t num_classes,
                                    size_t thickness,
                                    SbsegTensor **out);

/**
 * Boundary-guided smoothness loss of order 1 or 2. `foreground` holds one
 * flag per foreground class; the background channel is always active.
 * `grad` may be NULL when the gradient is not needed.
 *
 * # Safety
 * Handles must be live, `foreground` must hold `num_foreground` bytes and
 * `value` must be writable.
 */
SbsegStatus sbseg_smoothness_loss(const SbsegTensor *cam,
                                  const SbsegTensor *guide,
                                  const uint8_t *foreground,
                                  size_t num_foreground,
                                  uint32_t order,
                                  const SbsegLossOptions *options,
                                  double *value,
                                  SbsegTensor **grad);

/**
 * Smoothness refinement of a CAM guided by a boundary stack.
 *
 * # Safety
 * Handles must be live, `foreground` must hold `num_foreground` bytes and
 * `out` must be writable.
 */
SbsegStatus sbseg_refine(const SbsegTensor *cam,
                         const SbsegTensor *guide,
                         const uint8_t *foreground,
                         size_t num_foreground,
                         const SbsegRefineOptions *options,
                         SbsegTensor **out);

/**
 * Random-walk diffusion of a CAM over color affinities of an interleaved
 * RGB image.
 *
 * # Safety
 * `rgb` must point to `3 * width * height` bytes; `cam` must be live and
 * `out` writable.
 */
SbsegStatus sbseg_random_walk(const SbsegTensor *cam,
                              const uint8_t *rgb,
                              size_t width,
                              size_t height,
                              const SbsegRefineOptions *options,
                              SbsegTensor **out);

/**
 * Argmax pseudo-labels over the tagged classes, background below
 * `bg_threshold`.
 *
 * # Safety
 * `cam` must be live, `foreground` must hold `num_foreground` bytes and
 * `out` must be writable.
 */
SbsegStatus sbseg_pseudo_label(const SbsegTensor *cam,
                               const uint8_t *foreground,
                               size_t num_foreground,
                               double bg_threshold,
                               SbsegLabelMap **out);

/**
 * Mean IoU over `count` prediction/truth pairs, absent classes excluded.
 *
 * # Safety
 * `preds` and `truths` must each hold `count` live handles; `miou` must be
 * writable.
 */
SbsegStatus sbseg_miou(const SbsegLabelMap *const *preds,
                       const SbsegLabelMap *const *truths,
                       size_t count,
                       size_t num_classes,
                       double *miou);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SBSEG_H */
