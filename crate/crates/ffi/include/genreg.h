#ifndef GENREG_H
#define GENREG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Call outcome. Zero is success; nonzero codes describe the failure
 * class and `genreg_last_error` carries the message.
 */
typedef enum GenregStatus {
  GenregStatus_Ok = 0,
  GenregStatus_NullArgument = 1,
  GenregStatus_InvalidArgument = 2,
  GenregStatus_Io = 3,
  GenregStatus_Parse = 4,
  GenregStatus_Mismatch = 5,
  GenregStatus_BufferTooSmall = 6,
  GenregStatus_Internal = 7,
} GenregStatus;

/**
 * Opaque trained-model handle (checkpoint plus, for generative heads,
 * its vocabulary).
 */
typedef struct GenregModel GenregModel;

/**
 * Opaque value-vocabulary handle.
 */
typedef struct GenregVocab GenregVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message into `buf` (NUL-terminated, truncated to
 * `cap`). Returns the full message length in bytes, excluding the NUL.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes (or be NULL to query the
 * required length).
 */
uintptr_t genreg_last_error(char *buf, uintptr_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *genreg_version(void);

/**
 * Build a vocabulary with the dynamic-percentile algorithm over
 * `targets[0..len]`. On success writes a new handle to `out`.
 *
 * # Safety
 * `targets` must point to `len` readable doubles; `out` must be a valid
 * pointer slot. Free the handle with `genreg_vocab_free`.
 */
enum GenregStatus genreg_vocab_build_dynamic(const double *targets,
                                             uintptr_t len,
                                             double q_start,
                                             double q_end,
                                             double alpha,
                                             double eps,
                                             double resolution,
                                             uintptr_t max_iters,
                                             struct GenregVocab **out);

/**
 * Load a vocabulary file.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` a valid slot.
 */
enum GenregStatus genreg_vocab_load(const char *path, struct GenregVocab **out);

/**
 * Save a vocabulary to a file.
 *
 * # Safety
 * `vocab` must be a live handle; `path` a NUL-terminated UTF-8 string.
 */
enum GenregStatus genreg_vocab_save(const struct GenregVocab *vocab, const char *path);

/**
 * Number of value tokens (excludes the three special ids).
 *
 * # Safety
 * `vocab` must be a live handle.
 */
uintptr_t genreg_vocab_len(const struct GenregVocab *vocab);

/**
 * Token value at descending-order index `index`.
 *
 * # Safety
 * `vocab` must be a live handle; `out` a valid slot.
 */
enum GenregStatus genreg_vocab_value(const struct GenregVocab *vocab, uintptr_t index, double *out);

/**
 * Destroy a vocabulary handle (NULL is a no-op).
 *
 * # Safety
 * `vocab` must have come from this library and not be freed twice.
 */
void genreg_vocab_free(struct GenregVocab *vocab);

/**
 * Greedy-encode `y` into token ids. Writes up to `cap` ids into
 * `out_ids`, the emitted count into `out_len`, and the residual left
 * after encoding into `out_residual` (when non-NULL).
 *
 * # Safety
 * `out_ids` must point to `cap` writable u32 slots; other pointers as
 * documented.
 */
enum GenregStatus genreg_encode(const struct GenregVocab *vocab,
                                double y,
                                uintptr_t t_max,
                                uint32_t *out_ids,
                                uintptr_t cap,
                                uintptr_t *out_len,
                                double *out_residual);

/**
 * Decode a token-id sequence back to its value sum.
 *
 * # Safety
 * `ids` must point to `len` readable u32 values; `out` a valid slot.
 */
enum GenregStatus genreg_decode(const struct GenregVocab *vocab,
                                const uint32_t *ids,
                                uintptr_t len,
                                double *out);

/**
 * Load a checkpoint. Generative checkpoints also need `vocab_path`
 * (validated against the checkpoint's vocabulary fingerprint); pass
 * NULL for regression or ordinal checkpoints.
 *
 * # Safety
 * Paths are NUL-terminated UTF-8 strings; `out` a valid slot. Free the
 * handle with `genreg_model_free`.
 */
enum GenregStatus genreg_model_load(const char *ckpt_path,
                                    const char *vocab_path,
                                    struct GenregModel **out);

/**
 * Expected feature-vector length of the loaded model.
 *
 * # Safety
 * `model` must be a live handle.
 */
uintptr_t genreg_model_feature_dim(const struct GenregModel *model);

/**
 * Head kind of the loaded model: 0 generative, 1 value regression,
 * 2 bucket ordinal, -1 on a NULL handle.
 *
 * # Safety
 * `model` must be a live handle or NULL.
 */
int32_t genreg_model_head(const struct GenregModel *model);

/**
 * Predict the target for one raw (unstandardized) feature row.
 *
 * # Safety
 * `features` must point to `len` readable doubles matching the model's
 * feature dimension; `out_y` a valid slot.
 */
enum GenregStatus genreg_model_predict(const struct GenregModel *model,
                                       const double *features,
                                       uintptr_t len,
                                       double *out_y);

/**
 * Destroy a model handle (NULL is a no-op).
 *
 * # Safety
 * `model` must have come from this library and not be freed twice.
 */
void genreg_model_free(struct GenregModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GENREG_H */
