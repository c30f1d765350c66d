/* C interface for PBAN model loading and scoring. */

#ifndef PBAN_H
#define PBAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Success.
#define PBAN_STATUS_OK 0

// Invalid argument: null pointer, bad UTF-8, malformed parameter.
#define PBAN_STATUS_USAGE 1

// Unreadable or inconsistent data (file, image, checkpoint).
#define PBAN_STATUS_DATA 2

// Numeric failure (non-finite value, undefined result, internal panic).
#define PBAN_STATUS_NUMERIC 3

// Opaque handle to a loaded model: the checkpoint's weights plus the
// architecture config it was saved with.
typedef struct PbanModel PbanModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, empty if none.
// The pointer is invalidated by the next library call from this thread.
const char *pban_last_error(void);

// Loads a checkpoint from `path` into a fresh model handle written to
// `out_model`. The handle must be released with `pban_model_free`.
int32_t pban_model_load(const char *path, struct PbanModel **out_model);

// Releases a handle returned by `pban_model_load`. Null is a no-op.
void pban_model_free(struct PbanModel *model);

// Scores the SR image at `sr_path` against the HR reference at `hr_path`
// (PNG or binary PPM, equal dimensions) and writes the patch-average
// prediction to `out_score`.
int32_t pban_score_paths(const struct PbanModel *model,
                         const char *sr_path,
                         const char *hr_path,
                         double *out_score);

// Scores a pair of interleaved 8-bit RGB buffers (row-major, 3 bytes per
// pixel, both images the same size) and writes the patch-average
// prediction to `out_score`. Unsafe contract: `sr_rgb` and `hr_rgb` must
// each point to at least `width * height * 3` readable bytes.
int32_t pban_score_rgb(const struct PbanModel *model,
                       const uint8_t *sr_rgb,
                       const uint8_t *hr_rgb,
                       size_t width,
                       size_t height,
                       double *out_score);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* PBAN_H */
