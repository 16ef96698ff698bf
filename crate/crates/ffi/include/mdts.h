#ifndef MDTS_H
#define MDTS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum MdtsStatus {
  MDTS_STATUS_OK = 0,
  MDTS_STATUS_NULL_POINTER = 1,
  MDTS_STATUS_INVALID_ARGUMENT = 2,
  MDTS_STATUS_IO = 3,
  MDTS_STATUS_CORRUPTED = 4,
  MDTS_STATUS_VERSION_MISMATCH = 5,
  MDTS_STATUS_UNKNOWN_DOMAIN = 6,
  MDTS_STATUS_SHAPE = 7,
  MDTS_STATUS_BUFFER_TOO_SMALL = 8,
  MDTS_STATUS_INTERNAL = 9,
} MdtsStatus;

/*
 Opaque model handle.
 */
typedef struct MdtsModel MdtsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Loads a checkpoint file into a new handle written to `*out`.

 # Safety
 `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum MdtsStatus mdts_model_load(const char *path, struct MdtsModel **out);

/*
 Releases a handle; null is ignored.

 # Safety
 `model` must come from [`mdts_model_load`] and not be used afterwards.
 */
void mdts_model_free(struct MdtsModel *model);

/*
 Number of variates registered for `domain`.

 # Safety
 Pointers must be valid; `domain` nul-terminated.
 */
enum MdtsStatus mdts_model_variate_count(const struct MdtsModel *model,
                                         const char *domain,
                                         size_t *out);

/*
 Encoder width `D`.

 # Safety
 Pointers must be valid.
 */
enum MdtsStatus mdts_model_embedding_dim(const struct MdtsModel *model, size_t *out);

/*
 Copies the `V × D` variate-embedding table of `domain` into `out`,
 which must hold `capacity ≥ V·D` values.

 # Safety
 `out` must point to `capacity` writable doubles.
 */
enum MdtsStatus mdts_model_variate_embeddings(const struct MdtsModel *model,
                                              const char *domain,
                                              double *out,
                                              size_t capacity);

/*
 Forecasts `horizon` points for a `variates × context_len` context of
 `domain` (rows are catalogue variates `0..variates`). Writes
 `variates × horizon` values to `out`. `context_len` must be a multiple
 of the patch size.

 # Safety
 `context` must hold `variates·context_len` doubles and `out`
 `variates·horizon` writable doubles.
 */
enum MdtsStatus mdts_model_forecast(const struct MdtsModel *model,
                                    const char *domain,
                                    size_t variates,
                                    size_t context_len,
                                    const double *context,
                                    size_t horizon,
                                    double *out);

/*
 Mean per-variate Pearson correlation of two `variates × length` arrays.

 # Safety
 `target` and `prediction` must hold `variates·length` doubles.
 */
enum MdtsStatus mdts_ncc(const double *target,
                         const double *prediction,
                         size_t variates,
                         size_t length,
                         double *out);

/*
 Message of the last failed call on this thread (empty after success).
 Valid until the next call on the same thread.
 */
const char *mdts_last_error_message(void);

/*
 Library version, statically allocated.
 */
const char *mdts_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MDTS_H */
