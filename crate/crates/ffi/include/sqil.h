#ifndef SQIL_H
#define SQIL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SqilStatus {
  SQIL_STATUS_OK = 0,
  SQIL_STATUS_ERR_USAGE = 1,
  SQIL_STATUS_ERR_NUMERIC = 2,
  SQIL_STATUS_ERR_IO = 3,
  /**
   * A Rust panic was caught at the boundary.
   */
  SQIL_STATUS_ERR_INTERNAL = 4,
} SqilStatus;

/**
 * A policy loaded from a checkpoint (full precision or fake-quantized).
 */
typedef struct SqilPolicy SqilPolicy;

/**
 * An exported integer model.
 */
typedef struct SqilQModel SqilQModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call into this library.
 */
const char *sqil_last_error(void);

/**
 * NUL-terminated library version.
 */
const char *sqil_version(void);

/**
 * Loads a checkpoint file into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SqilStatus sqil_policy_load(const char *path, struct SqilPolicy **out);

/**
 * # Safety
 * `p` must come from [`sqil_policy_load`] and not be used afterwards.
 */
void sqil_policy_free(struct SqilPolicy *p);

/**
 * Observation length, or 0 for a null handle.
 *
 * # Safety
 * `p` must be null or a live handle.
 */
size_t sqil_policy_input_dim(const struct SqilPolicy *p);

/**
 * # Safety
 * `p` must be null or a live handle.
 */
size_t sqil_policy_output_dim(const struct SqilPolicy *p);

/**
 * Returns 1 when the checkpoint holds a fake-quantized policy.
 *
 * # Safety
 * `p` must be null or a live handle.
 */
int32_t sqil_policy_is_quantized(const struct SqilPolicy *p);

/**
 * Writes the action mean for `obs` into `out` (`out_len` must equal the
 * output dimension).
 *
 * # Safety
 * Buffers must hold at least the given number of elements.
 */
enum SqilStatus sqil_policy_act(const struct SqilPolicy *p,
                                const double *obs,
                                size_t obs_len,
                                double *out,
                                size_t out_len);

/**
 * Loads an exported integer model into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SqilStatus sqil_qmodel_load(const char *path, struct SqilQModel **out);

/**
 * Exports the integer form of a fake-quantized policy handle.
 *
 * # Safety
 * `p` must be a live policy handle and `out` a valid pointer.
 */
enum SqilStatus sqil_qmodel_from_policy(const struct SqilPolicy *p, struct SqilQModel **out);

/**
 * # Safety
 * `m` must come from this library and not be used afterwards.
 */
void sqil_qmodel_free(struct SqilQModel *m);

/**
 * # Safety
 * `m` must be null or a live handle.
 */
size_t sqil_qmodel_input_dim(const struct SqilQModel *m);

/**
 * # Safety
 * `m` must be null or a live handle.
 */
size_t sqil_qmodel_output_dim(const struct SqilQModel *m);

/**
 * Bytes of packed weight codes, excluding scales and biases.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
size_t sqil_qmodel_weight_bytes(const struct SqilQModel *m);

/**
 * Integer forward pass of an exported model.
 *
 * # Safety
 * Buffers must hold at least the given number of elements.
 */
enum SqilStatus sqil_qmodel_act(const struct SqilQModel *m,
                                const double *obs,
                                size_t obs_len,
                                double *out,
                                size_t out_len);

/**
 * Symmetric `bits`-bit codes of `x` at scale `gamma`.
 *
 * # Safety
 * `x` and `out` must hold `n` elements.
 */
enum SqilStatus sqil_quantize(const double *x, size_t n, double gamma, uint32_t bits, int32_t *out);

/**
 * `codes * gamma`.
 *
 * # Safety
 * `codes` and `out` must hold `n` elements.
 */
enum SqilStatus sqil_dequantize(const int32_t *codes, size_t n, double gamma, double *out);

/**
 * Row-major `C (m x n) = A (m x k) * B (k x n)` with i32 accumulation.
 *
 * # Safety
 * Buffers must hold `m*k`, `k*n` and `m*n` elements.
 */
enum SqilStatus sqil_gemm_i8i8_i32(const int8_t *a,
                                   const int8_t *b,
                                   size_t m,
                                   size_t k,
                                   size_t n,
                                   int32_t *c);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SQIL_H */
