/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef CHELA_H
#define CHELA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum ChelaStatus {
  CHELA_STATUS_OK = 0,
  CHELA_STATUS_NULL_POINTER = 1,
  CHELA_STATUS_INVALID_ARGUMENT = 2,
  CHELA_STATUS_SHAPE = 3,
  CHELA_STATUS_LENGTH_EXCEEDED = 4,
  CHELA_STATUS_OUT_OF_VOCABULARY = 5,
  CHELA_STATUS_NON_FINITE = 6,
  // Bad magic, truncation, manifest or tensor layout errors.
  CHELA_STATUS_CHECKPOINT = 7,
  CHELA_STATUS_IO = 8,
  CHELA_STATUS_JSON = 9,
  // The output buffer is smaller than the required length.
  CHELA_STATUS_BUFFER_TOO_SMALL = 10,
  // An internal panic was caught.
  CHELA_STATUS_PANIC = 11,
  CHELA_STATUS_INTERNAL = 12,
} ChelaStatus;

// Opaque model handle.
typedef struct ChelaModel ChelaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *chela_version(void);

// Message of the last failed call on this thread, or NULL after a
// successful call. Valid until the next call on this thread.
const char *chela_last_error(void);

// Creates a model from a JSON configuration and initializes it from the
// configuration's seed.
//
// # Safety
// `config_json` must be a NUL-terminated string and `out_model` a valid
// pointer.
enum ChelaStatus chela_model_create(const char *config_json, struct ChelaModel **out_model);

// Loads model weights from a checkpoint file. Optimizer state, if any, is
// ignored.
//
// # Safety
// `path` must be a NUL-terminated string and `out_model` a valid pointer.
enum ChelaStatus chela_model_load(const char *path, struct ChelaModel **out_model);

// Writes the model weights as a checkpoint without optimizer state.
//
// # Safety
// `model` must come from this library and `path` be a NUL-terminated string.
enum ChelaStatus chela_model_save(const struct ChelaModel *model, const char *path);

// Releases a model. NULL is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void chela_model_free(struct ChelaModel *model);

// Number of trainable scalars, or 0 for NULL.
//
// # Safety
// `model` must be NULL or come from this library.
size_t chela_model_param_count(const struct ChelaModel *model);

// Number of output values of a forward pass over `batch` sequences of
// `len` positions: `batch*len*vocab` for language models, `batch*classes`
// for classifiers, `batch` for regression.
//
// # Safety
// `model` must come from this library and `out_len` be a valid pointer.
enum ChelaStatus chela_model_output_len(const struct ChelaModel *model,
                                        size_t batch,
                                        size_t len,
                                        size_t *out_len);

// Forward pass over token ids laid out `[batch, len]`, row-major. Writes
// [`chela_model_output_len`] values to `out`.
//
// # Safety
// `ids` must hold `batch*len` values and `out` `out_capacity` values.
enum ChelaStatus chela_model_forward_tokens(const struct ChelaModel *model,
                                            const uint32_t *ids,
                                            size_t batch,
                                            size_t len,
                                            double *out,
                                            size_t out_capacity);

// Forward pass over real features laid out `[batch, len, channels]`,
// row-major.
//
// # Safety
// `x` must hold `batch*len*channels` values and `out` `out_capacity` values.
enum ChelaStatus chela_model_forward_features(const struct ChelaModel *model,
                                              const double *x,
                                              size_t batch,
                                              size_t len,
                                              size_t channels,
                                              double *out,
                                              size_t out_capacity);

// Causal linear attention of one sequence in chunks of `chunk` positions,
// with unit-gain RMS normalization of the output. `q`, `k`, `v` and `out`
// are `[len, d]`, row-major.
//
// # Safety
// Each pointer must hold `len*d` values.
enum ChelaStatus chela_linear_attention(const double *q,
                                        const double *k,
                                        const double *v,
                                        size_t len,
                                        size_t d,
                                        size_t chunk,
                                        double *out);

// Causal convolution `out[t] = sum_j kernel[j] x[t-j]` by FFT, truncated
// to `len` outputs.
//
// # Safety
// `kernel` must hold `kernel_len` values, `x` and `out` `len` values.
enum ChelaStatus chela_causal_conv(const double *kernel,
                                   size_t kernel_len,
                                   const double *x,
                                   size_t len,
                                   double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CHELA_H */
