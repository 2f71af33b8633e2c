#ifndef SEDKIT_H
#define SEDKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum SedkitStatus {
  SEDKIT_STATUS_OK = 0,
  SEDKIT_STATUS_NULL_POINTER = 1,
  SEDKIT_STATUS_INVALID_ARGUMENT = 2,
  SEDKIT_STATUS_IO = 3,
  SEDKIT_STATUS_CHECKSUM_MISMATCH = 4,
  SEDKIT_STATUS_UNSUPPORTED_VERSION = 5,
  SEDKIT_STATUS_SHAPE_MISMATCH = 6,
  SEDKIT_STATUS_UNDEFINED_CORRELATION = 7,
  SEDKIT_STATUS_BUFFER_TOO_SMALL = 8,
  SEDKIT_STATUS_INTERNAL = 99,
} SedkitStatus;

// Encoder loaded from a checkpoint.
typedef struct SedkitEncoder SedkitEncoder;

// Coupling flow loaded from a checkpoint.
typedef struct SedkitFlow SedkitFlow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the next call.
const char *sedkit_last_error(void);

// Library version as a static NUL-terminated string.
const char *sedkit_version(void);

// Loads an encoder checkpoint into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SedkitStatus sedkit_encoder_load(const char *path, struct SedkitEncoder **out);

// Releases an encoder. Null is ignored.
//
// # Safety
// `encoder` must come from [`sedkit_encoder_load`] and not be used afterwards.
void sedkit_encoder_free(struct SedkitEncoder *encoder);

// Embedding width, or 0 for a null handle.
//
// # Safety
// `encoder` must be null or a live handle.
uintptr_t sedkit_encoder_dim(const struct SedkitEncoder *encoder);

// Writes the embedding of `sentence`, mean-pooled over the final `pool_k` layers, into `out`.
//
// # Safety
// `out` must hold `out_len` doubles.
enum SedkitStatus sedkit_encoder_encode(const struct SedkitEncoder *encoder,
                                        const char *sentence,
                                        uint32_t pool_k,
                                        double *out,
                                        uintptr_t out_len);

// Writes the mean embedding of `count` encoders into `out`.
//
// # Safety
// `encoders` must point to `count` live handles and `out` hold `out_len` doubles.
enum SedkitStatus sedkit_ensemble_mean(const struct SedkitEncoder *const *encoders,
                                       uintptr_t count,
                                       const char *sentence,
                                       uint32_t pool_k,
                                       double *out,
                                       uintptr_t out_len);

// Mean squared difference between `target` and `student` over `dim` values.
//
// # Safety
// Both inputs must hold `dim` doubles.
enum SedkitStatus sedkit_sed_loss(const double *target,
                                  const double *student,
                                  uintptr_t dim,
                                  double *out);

// Loads a flow checkpoint into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SedkitStatus sedkit_flow_load(const char *path, struct SedkitFlow **out);

// Releases a flow. Null is ignored.
//
// # Safety
// `flow` must come from [`sedkit_flow_load`] and not be used afterwards.
void sedkit_flow_free(struct SedkitFlow *flow);

// Input width of the flow, or 0 for a null handle.
//
// # Safety
// `flow` must be null or a live handle.
uintptr_t sedkit_flow_dim(const struct SedkitFlow *flow);

// Cosine similarity of two embeddings after mapping both through the flow.
//
// # Safety
// `a` and `b` must hold `dim` doubles.
enum SedkitStatus sedkit_flow_score(const struct SedkitFlow *flow,
                                    const double *a,
                                    const double *b,
                                    uintptr_t dim,
                                    double *out);

// Cosine similarity; a zero vector scores 0.
//
// # Safety
// `a` and `b` must hold `len` doubles.
enum SedkitStatus sedkit_cosine(const double *a, const double *b, uintptr_t len, double *out);

// Pearson correlation of `n` pairs.
//
// # Safety
// `xs` and `ys` must hold `n` doubles.
enum SedkitStatus sedkit_pearson(const double *xs, const double *ys, uintptr_t n, double *out);

// Spearman correlation of `n` pairs with average ranks for ties.
//
// # Safety
// `xs` and `ys` must hold `n` doubles.
enum SedkitStatus sedkit_spearman(const double *xs, const double *ys, uintptr_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEDKIT_H */
