#ifndef SEGTRACK_H
#define SEGTRACK_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SEGTRACK_FLAG_MASK_EMPTY 1

#define SEGTRACK_FLAG_SCALE_NONPOSITIVE 2

#define SEGTRACK_FLAG_SCALE_LOW_CONFIDENCE 4

#define SEGTRACK_FLAG_SCALE_OUT_OF_RANGE 8

#define SEGTRACK_FLAG_PROXY_EMPTY 16

/**
 * Result of every fallible call.
 */
typedef enum SegtrackStatus {
  SEGTRACK_STATUS_OK = 0,
  SEGTRACK_STATUS_NULL_POINTER = 1,
  SEGTRACK_STATUS_INVALID_ARGUMENT = 2,
  SEGTRACK_STATUS_IO = 3,
  SEGTRACK_STATUS_MODEL = 4,
  SEGTRACK_STATUS_SHAPE_MISMATCH = 5,
  SEGTRACK_STATUS_EMPTY_TARGET = 6,
  SEGTRACK_STATUS_CONFIG = 7,
  SEGTRACK_STATUS_INTERNAL = 8,
  SEGTRACK_STATUS_PANIC = 9,
} SegtrackStatus;

/**
 * Loaded network weights, shareable between trackers.
 */
typedef struct SegtrackModel SegtrackModel;

/**
 * One tracked target.
 */
typedef struct SegtrackTracker SegtrackTracker;

/**
 * Axis-aligned box in pixels, top-left corner plus size.
 */
typedef struct SegtrackBox {
  double x;
  double y;
  double w;
  double h;
} SegtrackBox;

/**
 * Boxes and fallback flags of one tracked frame.
 */
typedef struct SegtrackFrame {
  uint32_t index;
  struct SegtrackBox visible;
  struct SegtrackBox inherent;
  /**
   * Bitwise OR of `SEGTRACK_FLAG_*`.
   */
  uint32_t flags;
} SegtrackFrame;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *segtrack_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *segtrack_version(void);

/**
 * Loads a weights file written by `segtrack train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SegtrackStatus segtrack_model_load(const char *path, struct SegtrackModel **out);

/**
 * Creates a model with the default architecture and untrained weights
 * drawn from `seed`. Useful for smoke tests only.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum SegtrackStatus segtrack_model_random(uint64_t seed, struct SegtrackModel **out);

/**
 * # Safety
 * `model` must come from a `segtrack_model_*` constructor and not be used
 * afterwards. Null is ignored. Trackers created from it stay valid.
 */
void segtrack_model_free(struct SegtrackModel *model);

/**
 * Starts tracking from a mask on the first frame.
 *
 * # Safety
 * `rgb` must hold `width*height*3` bytes and `mask` `width*height` bytes.
 * `ablate` is null or a comma-separated flag list such as `"no_sem"`.
 * `first` may be null; `out` must be valid.
 */
enum SegtrackStatus segtrack_tracker_init_mask(const struct SegtrackModel *model,
                                               const uint8_t *rgb,
                                               uint32_t width,
                                               uint32_t height,
                                               const uint8_t *mask,
                                               const char *ablate,
                                               struct SegtrackFrame *first,
                                               struct SegtrackTracker **out);

/**
 * Starts tracking from a box on the first frame.
 *
 * # Safety
 * As [`segtrack_tracker_init_mask`], without the mask.
 */
enum SegtrackStatus segtrack_tracker_init_box(const struct SegtrackModel *model,
                                              const uint8_t *rgb,
                                              uint32_t width,
                                              uint32_t height,
                                              struct SegtrackBox target,
                                              const char *ablate,
                                              struct SegtrackFrame *first,
                                              struct SegtrackTracker **out);

/**
 * Tracks the next frame, which must have the first frame's size.
 *
 * # Safety
 * `tracker` and `out` must be valid; `rgb` must hold `width*height*3` bytes.
 */
enum SegtrackStatus segtrack_tracker_step(struct SegtrackTracker *tracker,
                                          const uint8_t *rgb,
                                          uint32_t width,
                                          uint32_t height,
                                          struct SegtrackFrame *out);

/**
 * Copies the latest foreground probability, quantized to 0..=255, into
 * `out`, which must hold `len >= width*height` bytes.
 *
 * # Safety
 * `tracker` must be valid and `out` must point to `len` writable bytes.
 */
enum SegtrackStatus segtrack_tracker_mask(const struct SegtrackTracker *tracker,
                                          uint8_t *out,
                                          size_t len);

/**
 * # Safety
 * `tracker` must come from a `segtrack_tracker_init_*` call and not be used
 * afterwards. Null is ignored.
 */
void segtrack_tracker_free(struct SegtrackTracker *tracker);

/**
 * Intersection over union of two 8-bit masks binarized at 128.
 *
 * # Safety
 * `a` and `b` must hold `width*height` bytes; `out` must be valid.
 */
enum SegtrackStatus segtrack_jaccard(const uint8_t *a,
                                     const uint8_t *b,
                                     uint32_t width,
                                     uint32_t height,
                                     double *out);

/**
 * # Safety
 * `out` must be valid.
 */
enum SegtrackStatus segtrack_box_iou(struct SegtrackBox a, struct SegtrackBox b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEGTRACK_H */
