#ifndef ATROSEG_H
#define ATROSEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AtrosegStatus {
  ATROSEG_STATUS_OK = 0,
  ATROSEG_STATUS_NULL_POINTER = 1,
  ATROSEG_STATUS_INVALID_ARGUMENT = 2,
  ATROSEG_STATUS_IO = 3,
  ATROSEG_STATUS_BAD_CHECKPOINT = 4,
  ATROSEG_STATUS_SHAPE_MISMATCH = 5,
  ATROSEG_STATUS_UNDEFINED_METRIC = 6,
  ATROSEG_STATUS_INTERNAL = 7,
} AtrosegStatus;

// A loaded cascade of stage models.
typedef struct AtrosegCascade AtrosegCascade;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after success.
// The pointer stays valid until the next call on this thread.
const char *atroseg_last_error(void);

// Loads `count` checkpoints in cascade order into `*out`.
//
// # Safety
// `paths` must point to `count` NUL-terminated strings; `out` must be
// writable.
enum AtrosegStatus atroseg_cascade_load(const char *const *paths,
                                        size_t count,
                                        struct AtrosegCascade **out);

// Releases a cascade; null is ignored.
//
// # Safety
// `cascade` must come from [`atroseg_cascade_load`] and not be used again.
void atroseg_cascade_free(struct AtrosegCascade *cascade);

// Number of stages in the cascade, 0 for null.
//
// # Safety
// `cascade` must be null or a live handle.
size_t atroseg_cascade_stages(const struct AtrosegCascade *cascade);

// Square input extent the models were trained at, 0 for null.
//
// # Safety
// `cascade` must be null or a live handle.
size_t atroseg_cascade_input_size(const struct AtrosegCascade *cascade);

// Foreground probabilities for a `height × width` image with values in
// `[0,1]`. Other sizes than the input size are resized internally.
//
// # Safety
// `image` and `prob_out` must each hold `height·width` floats.
enum AtrosegStatus atroseg_cascade_predict(const struct AtrosegCascade *cascade,
                                           const float *image,
                                           size_t height,
                                           size_t width,
                                           float *prob_out);

// Jaccard coefficient of two `height × width` masks (nonzero is
// foreground).
//
// # Safety
// `pred` and `gt` must hold `height·width` bytes; `out` must be writable.
enum AtrosegStatus atroseg_jaccard(const uint8_t *pred,
                                   const uint8_t *gt,
                                   size_t height,
                                   size_t width,
                                   double *out);

// Dice coefficient; arguments as [`atroseg_jaccard`].
//
// # Safety
// As [`atroseg_jaccard`].
enum AtrosegStatus atroseg_dice(const uint8_t *pred,
                                const uint8_t *gt,
                                size_t height,
                                size_t width,
                                double *out);

// Average contour distance scaled by `spacing`. Returns
// `ATROSEG_STATUS_UNDEFINED_METRIC` when either boundary is empty.
//
// # Safety
// As [`atroseg_jaccard`].
enum AtrosegStatus atroseg_acd(const uint8_t *pred,
                               const uint8_t *gt,
                               size_t height,
                               size_t width,
                               double spacing,
                               double *out);

// Average surface distance scaled by `spacing`.
//
// # Safety
// As [`atroseg_jaccard`].
enum AtrosegStatus atroseg_asd(const uint8_t *pred,
                               const uint8_t *gt,
                               size_t height,
                               size_t width,
                               double spacing,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATROSEG_H */
