#ifndef GMPARSE_H
#define GMPARSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define GMPARSE_NUM_CONTINUOUS 9

#define GMPARSE_NUM_DISCRETE 6

#define GMPARSE_NUM_COARSE 3

#define GMPARSE_NUM_FINE 8

typedef enum GmparseStatus {
  GMPARSE_STATUS_OK = 0,
  GMPARSE_STATUS_NULL_POINTER = 1,
  GMPARSE_STATUS_INVALID_ARGUMENT = 2,
  GMPARSE_STATUS_SHAPE = 3,
  GMPARSE_STATUS_IO = 4,
  GMPARSE_STATUS_FORMAT = 5,
  GMPARSE_STATUS_NUMERIC = 6,
  GMPARSE_STATUS_PANIC = 7,
} GmparseStatus;

/**
 * Opaque handle to a loaded parser.
 */
typedef struct GmparseParser GmparseParser;

/**
 * One parsed image.
 */
typedef struct GmparsePrediction {
  /**
   * In the original units (layer counts, parameter counts, ...).
   */
  double continuous[GMPARSE_NUM_CONTINUOUS];
  /**
   * In [0, 1] relative to the training range.
   */
  double continuous_normalized[GMPARSE_NUM_CONTINUOUS];
  uint32_t discrete[GMPARSE_NUM_DISCRETE];
  double coarse[GMPARSE_NUM_COARSE];
  double fine[GMPARSE_NUM_FINE];
} GmparsePrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * failing call on the same thread.
 */
const char *gmparse_last_error(void);

/**
 * Static version string.
 */
const char *gmparse_version(void);

/**
 * Load fold `fold` of a `gmparse parse train` run directory.
 *
 * # Safety
 * `run_dir` must be a NUL-terminated string; `out` must be writable.
 */
enum GmparseStatus gmparse_parser_load(const char *run_dir,
                                       size_t fold,
                                       struct GmparseParser **out);

/**
 * # Safety
 * `parser` must come from [`gmparse_parser_load`] and not be used afterwards.
 */
void gmparse_parser_free(struct GmparseParser *parser);

/**
 * Expected image shape as channels, height, width.
 *
 * # Safety
 * `parser` must be live; `shape` must hold 3 values.
 */
enum GmparseStatus gmparse_parser_input_shape(const struct GmparseParser *parser, size_t *shape);

/**
 * Fingerprints of `n` images; `out` receives the same number of values as
 * `pixels`.
 *
 * # Safety
 * `pixels` and `out` must each hold `len` floats.
 */
enum GmparseStatus gmparse_parser_fingerprint(const struct GmparseParser *parser,
                                              const float *pixels,
                                              size_t n,
                                              size_t len,
                                              float *out);

/**
 * Parse `n` images into `out[0..n]`.
 *
 * # Safety
 * `pixels` must hold `len` floats and `out` must hold `n` predictions.
 */
enum GmparseStatus gmparse_parser_predict(const struct GmparseParser *parser,
                                          const float *pixels,
                                          size_t n,
                                          size_t len,
                                          struct GmparsePrediction *out);

/**
 * Centered magnitude spectrum of an `h` x `w` image, scaled to [0, 1].
 *
 * # Safety
 * `image` and `out` must each hold `h * w` doubles.
 */
enum GmparseStatus gmparse_spectrum_magnitude(const double *image,
                                              size_t h,
                                              size_t w,
                                              bool log_scale,
                                              double *out);

/**
 * Area under the ROC curve; `labels` are 0 (negative) or non-zero.
 *
 * # Safety
 * `scores` and `labels` must each hold `n` values; `out` must be writable.
 */
enum GmparseStatus gmparse_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GMPARSE_H */
