#ifndef ACAM_H
#define ACAM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AcamStatus {
  ACAM_STATUS_OK = 0,
  ACAM_STATUS_NULL_POINTER = 1,
  ACAM_STATUS_INVALID_INPUT = 2,
  ACAM_STATUS_FORMAT_ERROR = 3,
  ACAM_STATUS_IO = 4,
  ACAM_STATUS_BUFFER_TOO_SMALL = 5,
  ACAM_STATUS_PANIC = 6,
  ACAM_STATUS_OTHER = 7,
} AcamStatus;

/**
 * Opaque multi-scale model.
 */
typedef struct AcamModel AcamModel;

/**
 * Inference settings a checkpoint is loaded with.
 */
typedef struct AcamSettings {
  size_t image_size;
  size_t otsu_bins;
  double margin_fraction;
  /**
   * Nonzero aggregates classifiers on logits instead of probabilities.
   */
  int32_t aggregate_on_logits;
} AcamSettings;

/**
 * Inclusive box; rows `top..=bottom`, columns `left..=right`.
 */
typedef struct AcamBox {
  size_t top;
  size_t left;
  size_t bottom;
  size_t right;
} AcamBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library on the same thread.
 */
const char *acam_last_error(void);

struct AcamSettings acam_settings_default(void);

/**
 * Loads a checkpoint. `*out` receives a handle to release with
 * [`acam_model_free`].
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum AcamStatus acam_model_load(const char *path,
                                struct AcamSettings settings,
                                struct AcamModel **out);

/**
 * # Safety
 * `model` must come from [`acam_model_load`] and not be used afterwards.
 * Null is accepted.
 */
void acam_model_free(struct AcamModel *model);

/**
 * # Safety
 * `model` must be a live handle and the out pointers valid.
 */
enum AcamStatus acam_model_info(const struct AcamModel *model, size_t *scales, size_t *categories);

/**
 * Multi-scale class probabilities for one `c x h x w` image in `[0, 1]`.
 * `probs` must hold at least the model's category count.
 *
 * # Safety
 * `pixels` must hold `c*h*w` values and `probs` `probs_len` values.
 */
enum AcamStatus acam_predict(const struct AcamModel *model,
                             const double *pixels,
                             size_t c,
                             size_t h,
                             size_t w,
                             double *probs,
                             size_t probs_len,
                             size_t *label);

/**
 * Attention map of scale `scale` (0-based) for one image, plus the scale-1
 * attended box in the image's own pixel coordinates.
 *
 * `map_h`/`map_w` always receive the map extents; if `map_cap` is smaller
 * than their product the call returns `BufferTooSmall` and writes nothing
 * else.
 *
 * # Safety
 * `pixels` must hold `c*h*w` values, `map` `map_cap` values (may be null
 * when `map_cap` is 0), and the out pointers must be valid.
 */
enum AcamStatus acam_attention(const struct AcamModel *model,
                               const double *pixels,
                               size_t c,
                               size_t h,
                               size_t w,
                               size_t scale,
                               double *map,
                               size_t map_cap,
                               size_t *map_h,
                               size_t *map_w,
                               struct AcamBox *attended);

/**
 * Otsu binarization of an `h x w` map. `mask` receives `h*w` bytes (0/1);
 * `threshold` receives the cut level, or -1 for a constant map.
 *
 * # Safety
 * `map` must hold `h*w` values and `mask` room for as many bytes.
 */
enum AcamStatus acam_otsu(const double *map,
                          size_t h,
                          size_t w,
                          size_t bins,
                          uint8_t *mask,
                          int64_t *threshold);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum AcamStatus acam_iou(struct AcamBox a, struct AcamBox b, double *out);

/**
 * Writes a `c x h x w` feature-map file.
 *
 * # Safety
 * `path` must be nul-terminated and `data` hold `c*h*w` values.
 */
enum AcamStatus acam_fmap_write(const char *path, const double *data, size_t c, size_t h, size_t w);

/**
 * Reads a feature-map file. `dims` always receives `[c, h, w]` of a
 * well-formed file; the values are copied only if `cap` suffices,
 * otherwise `BufferTooSmall` is returned.
 *
 * # Safety
 * `path` must be nul-terminated, `dims` hold 3 values and `data` `cap`
 * values (may be null when `cap` is 0).
 */
enum AcamStatus acam_fmap_read(const char *path, double *data, size_t cap, size_t *dims);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACAM_H */
