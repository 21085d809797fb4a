#ifndef COLORPROP_H
#define COLORPROP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define CP_MODE_FULL 0

#define CP_MODE_LOCAL 1

#define CP_MODE_GLOBAL 2

/**
 * Result of every call.
 */
typedef enum CpStatus {
  CP_STATUS_OK = 0,
  /**
   * A required pointer was null or a string was not UTF-8.
   */
  CP_STATUS_INVALID_ARGUMENT = 1,
  CP_STATUS_SHAPE = 2,
  CP_STATUS_CONTRACT = 3,
  CP_STATUS_FORMAT = 4,
  CP_STATUS_CONFIG = 5,
  CP_STATUS_IO = 6,
  CP_STATUS_NUMERIC = 7,
  /**
   * The engine panicked; the handle should be freed.
   */
  CP_STATUS_INTERNAL = 8,
} CpStatus;

/**
 * Loaded networks and feature extractor.
 */
typedef struct CpEngine CpEngine;

/**
 * A sequence being propagated.
 */
typedef struct CpSequence CpSequence;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates an engine. `warp_checkpoint` and `fusion_checkpoint` may be null
 * when the modes used do not need them; a null `extractor` means the
 * built-in one, otherwise `"builtin"` or `"import:DIR"`.
 *
 * # Safety
 * String arguments must be null or nul-terminated; `out` must be writable.
 */
enum CpStatus cp_engine_new(const char *warp_checkpoint,
                            const char *fusion_checkpoint,
                            const char *extractor,
                            struct CpEngine **out);

/**
 * Frees an engine. Sequences started from it stay valid.
 *
 * # Safety
 * `engine` must be null or come from [`cp_engine_new`] and not be freed twice.
 */
void cp_engine_free(struct CpEngine *engine);

/**
 * Starts a sequence from its first gray frame and that frame's colors.
 * `mode` is one of `CP_MODE_FULL`, `CP_MODE_LOCAL`, `CP_MODE_GLOBAL`.
 *
 * # Safety
 * `gray1` must hold `height * width` floats, `rgb1` three times as many.
 */
enum CpStatus cp_sequence_begin(const struct CpEngine *engine,
                                uint32_t mode,
                                size_t height,
                                size_t width,
                                const float *gray1,
                                const float *rgb1,
                                struct CpSequence **out);

/**
 * Colors the next gray frame, writing `3 * height * width` floats to `rgb_out`.
 *
 * # Safety
 * `gray` must hold `height * width` floats and `rgb_out` three times as many.
 */
enum CpStatus cp_sequence_push(struct CpSequence *sequence, const float *gray, float *rgb_out);

/**
 * 1-based index of the last frame produced by the sequence, or 0 for null.
 *
 * # Safety
 * `sequence` must be null or a live handle.
 */
size_t cp_sequence_frame(const struct CpSequence *sequence);

/**
 * # Safety
 * `sequence` must be null or come from [`cp_sequence_begin`] and not be freed twice.
 */
void cp_sequence_free(struct CpSequence *sequence);

/**
 * Message of the last failure on this thread, or null. The pointer is valid
 * until the next failing call on the same thread.
 */
const char *cp_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COLORPROP_H */
