/* partalign C API: part-aligned person embedding extraction. */

#ifndef PARTALIGN_H
#define PARTALIGN_H

/* Generated by cbindgen from partalign-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum PaStatus {
  PA_OK = 0,
  /**
   * A required pointer argument was null.
   */
  PA_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  PA_INVALID_UTF8 = 2,
  /**
   * The checkpoint could not be read or parsed.
   */
  PA_IO_ERROR = 3,
  /**
   * Checkpoint and configuration disagree, or the head cannot embed
   * without external masks.
   */
  PA_INCOMPATIBLE = 4,
  /**
   * Image buffer has the wrong length or non-finite values.
   */
  PA_BAD_INPUT = 5,
  /**
   * The computation produced non-finite values.
   */
  PA_NUMERIC = 6,
} PaStatus;

/**
 * An embedding model: parameters plus the two configuration records.
 */
typedef struct PaModel PaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *pa_last_error_message(void);

/**
 * Loads a checkpoint (with its JSON sidecar) into a fresh handle.
 *
 * # Safety
 * `checkpoint_path` must be a NUL-terminated string; `out` must be a valid
 * pointer to receive the handle.
 */
enum PaStatus pa_model_load(const char *checkpoint_path, struct PaModel **out);

/**
 * Frees a handle returned by [`pa_model_load`]. Null is a no-op.
 *
 * # Safety
 * `model` must be a pointer previously returned by `pa_model_load` and not
 * freed since.
 */
void pa_model_free(struct PaModel *model);

/**
 * Width of the embedding vectors this model produces.
 *
 * # Safety
 * `model` must be a live handle.
 */
size_t pa_model_embedding_dim(const struct PaModel *model);

/**
 * Expected image geometry: height, width, channels (row-major, channel
 * fastest, values in [0,1]).
 *
 * # Safety
 * `model` must be a live handle; out pointers may be null to skip.
 */
void pa_model_input_shape(const struct PaModel *model,
                          size_t *height,
                          size_t *width,
                          size_t *channels);

/**
 * Embeds one image into `out`. `image_len` must equal H*W*3 and `out_len`
 * must equal the embedding dimension.
 *
 * # Safety
 * `model` must be a live handle; `image` and `out` must point to buffers of
 * the stated lengths.
 */
enum PaStatus pa_model_embed(const struct PaModel *model,
                             const double *image,
                             size_t image_len,
                             double *out,
                             size_t out_len);

/**
 * Squared Euclidean distance between two embeddings of equal width.
 *
 * # Safety
 * Both pointers must address `len` readable doubles.
 */
double pa_squared_distance(const double *a, const double *b, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PARTALIGN_H */
