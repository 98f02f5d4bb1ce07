#ifndef FXNET_H
#define FXNET_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FxRounding {
  FX_ROUNDING_NEAREST = 0,
  FX_ROUNDING_STOCHASTIC = 1,
} FxRounding;

typedef enum FxStatus {
  FX_STATUS_OK = 0,
  FX_STATUS_NULL_POINTER = 1,
  FX_STATUS_INVALID_ARGUMENT = 2,
  FX_STATUS_FORMAT = 3,
  FX_STATUS_SHAPE = 4,
  FX_STATUS_OVERFLOW = 5,
  FX_STATUS_BUFFER_TOO_SMALL = 6,
  FX_STATUS_UNSUPPORTED = 7,
  FX_STATUS_PANIC = 8,
} FxStatus;

/**
 * Opaque tensor handle.
 */
typedef struct FxTensorHandle FxTensorHandle;

/**
 * Array parameters. Zero in `lfsr_width` or `p` means "derive"; a
 * non-positive `bandwidth` means unlimited.
 */
typedef struct FxSysConfig {
  size_t n;
  uint32_t acc_width;
  uint32_t input_width;
  uint32_t lfsr_seed;
  uint32_t lfsr_width;
  size_t p;
  size_t l2_capacity;
  double bandwidth;
} FxSysConfig;

typedef struct FxTrace {
  size_t n;
  size_t p;
  size_t tiles;
  uint64_t compute_cycles;
  uint64_t total_cycles;
  uint64_t memory_stall_cycles;
  uint64_t output_stall_cycles;
  uint64_t macc_ops;
  uint64_t ops;
  size_t reuse_a;
  size_t reuse_b;
  uint64_t fetched_elements;
  double ops_per_cycle;
  double utilization;
  uint32_t max_acc_bits;
  size_t rounding_units;
  size_t dsp_units;
} FxTrace;

/**
 * Throughput summary; efficiency fields are NaN when no power was given.
 */
typedef struct FxPerf {
  double gops;
  double peak_gops;
  double gops_per_watt;
  double peak_gops_per_watt;
  double utilization;
  double rounding_overhead;
} FxPerf;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fx_version(void);

/**
 * Copy the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `cap`). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t fx_last_error(char *buf, size_t cap);

/**
 * Static description of a status code.
 */
const char *fx_status_str(enum FxStatus s);

/**
 * Convert one real to `<il, fl>`; writes the mantissa. `draw` is the
 * 64-bit uniform used by stochastic rounding.
 *
 * # Safety
 * `out` must be null or writable.
 */
enum FxStatus fx_convert(double x,
                         uint32_t il,
                         uint32_t fl,
                         enum FxRounding mode,
                         uint64_t draw,
                         int64_t *out);

/**
 * Tensor from real values, rounded into `<il, fl>` with draws keyed by
 * `seed`.
 *
 * # Safety
 * `shape` must hold `ndim` elements, `values` `len` elements; `out` must be
 * writable.
 */
enum FxStatus fx_tensor_from_f64(const size_t *shape,
                                 size_t ndim,
                                 const double *values,
                                 size_t len,
                                 uint32_t il,
                                 uint32_t fl,
                                 enum FxRounding mode,
                                 uint64_t seed,
                                 struct FxTensorHandle **out);

/**
 * Tensor from raw mantissas, each of which must fit `<il, fl>`.
 *
 * # Safety
 * As for [`fx_tensor_from_f64`].
 */
enum FxStatus fx_tensor_from_mantissas(const size_t *shape,
                                       size_t ndim,
                                       const int32_t *data,
                                       size_t len,
                                       uint32_t il,
                                       uint32_t fl,
                                       struct FxTensorHandle **out);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `t` must be null or an unfreed handle from this library.
 */
void fx_tensor_free(struct FxTensorHandle *t);

/**
 * Element count, or 0 for a null handle.
 *
 * # Safety
 * `t` must be null or a live handle.
 */
size_t fx_tensor_len(const struct FxTensorHandle *t);

/**
 * Rank, or 0 for a null handle.
 *
 * # Safety
 * `t` must be null or a live handle.
 */
size_t fx_tensor_ndim(const struct FxTensorHandle *t);

/**
 * # Safety
 * `t` must be a live handle; `out` must hold `cap` elements.
 */
enum FxStatus fx_tensor_shape(const struct FxTensorHandle *t, size_t *out, size_t cap);

/**
 * # Safety
 * `t` must be a live handle; `il` and `fl` must be writable.
 */
enum FxStatus fx_tensor_format(const struct FxTensorHandle *t, uint32_t *il, uint32_t *fl);

/**
 * # Safety
 * `t` must be a live handle; `out` must hold `cap` elements.
 */
enum FxStatus fx_tensor_mantissas(const struct FxTensorHandle *t, int32_t *out, size_t cap);

/**
 * Values as `f64` (exact: every mantissa times `2^-fl` is representable).
 *
 * # Safety
 * `t` must be a live handle; `out` must hold `cap` elements.
 */
enum FxStatus fx_tensor_to_f64(const struct FxTensorHandle *t, double *out, size_t cap);

/**
 * `A * B` with exact accumulation and one conversion into `<il, fl>`.
 *
 * # Safety
 * `a`, `b` must be live handles; `out` must be writable.
 */
enum FxStatus fx_gemm(const struct FxTensorHandle *a,
                      const struct FxTensorHandle *b,
                      uint32_t il,
                      uint32_t fl,
                      enum FxRounding mode,
                      uint64_t seed,
                      struct FxTensorHandle **out);

/**
 * The default array (28 x 28 settings) resized to dimension `n`.
 */
struct FxSysConfig fx_sys_config_default(size_t n);

/**
 * Simulate `A * B` on the array with stochastic rounding into `<il, fl>`.
 * `result` may be null if only the trace is wanted.
 *
 * # Safety
 * `a`, `b` must be live handles; `cfg` and `trace` must be valid pointers;
 * `result` must be null or writable.
 */
enum FxStatus fx_sysarray_simulate(const struct FxTensorHandle *a,
                                   const struct FxTensorHandle *b,
                                   const struct FxSysConfig *cfg,
                                   uint32_t il,
                                   uint32_t fl,
                                   struct FxTrace *trace,
                                   struct FxTensorHandle **result);

/**
 * Scale a trace by a clock (Hz) and optional power (W; <= 0 for none).
 *
 * # Safety
 * `trace` and `out` must be valid pointers.
 */
enum FxStatus fx_perf_report(const struct FxTrace *trace,
                             double frequency_hz,
                             double power_w,
                             struct FxPerf *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FXNET_H */
