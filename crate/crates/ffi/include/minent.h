/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef MINENT_H
#define MINENT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MinentBeta2Mode {
  MINENT_BETA2_MODE_LEARNABLE = 0,
  MINENT_BETA2_MODE_FIXED = 1,
  MINENT_BETA2_MODE_DISABLED = 2,
} MinentBeta2Mode;

typedef enum MinentLossKind {
  MINENT_LOSS_KIND_CE = 0,
  MINENT_LOSS_KIND_MIX = 1,
  MINENT_LOSS_KIND_MIN = 2,
} MinentLossKind;

typedef enum MinentStatus {
  MINENT_STATUS_OK = 0,
  MINENT_STATUS_NULL_POINTER = 1,
  MINENT_STATUS_INVALID_INPUT = 2,
  MINENT_STATUS_INVALID_CONFIG = 3,
  MINENT_STATUS_DEGENERATE_TARGET = 4,
  MINENT_STATUS_DATA_INTEGRITY = 5,
  MINENT_STATUS_DIVERGENCE = 6,
  MINENT_STATUS_CHECKPOINT = 7,
  MINENT_STATUS_MISSING_ARTIFACT = 8,
  MINENT_STATUS_IO = 9,
  MINENT_STATUS_PANIC = 10,
} MinentStatus;

/**
 * Opaque loss-head parameters.
 */
typedef struct MinentLossParams MinentLossParams;

/**
 * Opaque classifier together with its loss head.
 */
typedef struct MinentNet MinentNet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *minent_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *minent_version(void);

/**
 * `out[0..k] = softmax(logits[0..k])`.
 *
 * # Safety
 * `logits` and `out` must be valid for `k` doubles.
 */
enum MinentStatus minent_softmax(const double *logits, size_t k, double *out);

/**
 * Entropy of `p` divided by `ln_base`.
 *
 * # Safety
 * `p` must be valid for `k` doubles; `out` must be writable.
 */
enum MinentStatus minent_entropy(const double *p, size_t k, double ln_base, double *out);

/**
 * `-sum target * ln(p_hat) / ln_base`.
 *
 * # Safety
 * `target` and `p_hat` must be valid for `k` doubles; `out` must be writable.
 */
enum MinentStatus minent_cross_entropy(const double *target,
                                       const double *p_hat,
                                       size_t k,
                                       double ln_base,
                                       double *out);

/**
 * `-sum p_hat * ln(target) / ln_base` for a label-smoothed one-hot target.
 *
 * # Safety
 * `p_hat` must be valid for `k` doubles; `out` must be writable.
 */
enum MinentStatus minent_swapped_cross_entropy(size_t class_index,
                                               double epsilon,
                                               const double *p_hat,
                                               size_t k,
                                               double ln_base,
                                               double *out);

/**
 * `sum weighting * ln(weighting / other) / ln_base`.
 *
 * # Safety
 * `weighting` and `other` must be valid for `k` doubles; `out` must be writable.
 */
enum MinentStatus minent_kl_divergence(const double *weighting,
                                       const double *other,
                                       size_t k,
                                       double ln_base,
                                       double *out);

/**
 * Default loss head: beta1 fixed at 1, learnable beta2 and base.
 */
struct MinentLossParams *minent_loss_params_new_default(void);

/**
 * Loss head with the given modes and initial constrained values.
 *
 * # Safety
 * `out` must be writable.
 */
enum MinentStatus minent_loss_params_new(bool beta1_learnable,
                                         double beta1_init,
                                         enum MinentBeta2Mode beta2_mode,
                                         double beta2_init,
                                         bool base_learnable,
                                         double ln_base_init,
                                         struct MinentLossParams **out);

/**
 * # Safety
 * `params` must come from this library and not be used afterwards.
 */
void minent_loss_params_free(struct MinentLossParams *params);

/**
 * Constrained values `beta1`, `beta2` and `ln(base)`.
 *
 * # Safety
 * `params` must be a live handle; out-pointers must be writable.
 */
enum MinentStatus minent_loss_params_values(const struct MinentLossParams *params,
                                            double *beta1,
                                            double *beta2,
                                            double *ln_base);

/**
 * Raw parameters `[theta_beta1, theta_beta2, theta_base]`.
 *
 * # Safety
 * `params` must be a live handle; `out` must be valid for 3 doubles.
 */
enum MinentStatus minent_loss_params_get_raw(const struct MinentLossParams *params, double *out);

/**
 * # Safety
 * `params` must be a live handle; `raw` must be valid for 3 doubles.
 */
enum MinentStatus minent_loss_params_set_raw(struct MinentLossParams *params, const double *raw);

/**
 * Loss of one sample with a label-smoothed target, plus its gradient.
 * `grad_logits` (k doubles) and `grad_raw` (3 doubles) may be NULL.
 * `MINENT_LOSS_KIND_CE` ignores `params` and uses plain cross entropy.
 *
 * # Safety
 * `logits` must be valid for `k` doubles, `params` a live handle, and
 * non-NULL outputs writable for their lengths.
 */
enum MinentStatus minent_loss_value_and_grad(enum MinentLossKind kind,
                                             const double *logits,
                                             size_t k,
                                             size_t class_index,
                                             double epsilon,
                                             const struct MinentLossParams *params,
                                             double *total,
                                             double *grad_logits,
                                             double *grad_raw);

/**
 * Freshly initialized classifier with the default loss head.
 *
 * # Safety
 * `hidden_dims` must be valid for `num_hidden` entries (may be NULL when
 * `num_hidden` is 0); `out` must be writable.
 */
enum MinentStatus minent_net_new(size_t input_dim,
                                 const size_t *hidden_dims,
                                 size_t num_hidden,
                                 size_t num_classes,
                                 double dropout_rate,
                                 uint64_t seed,
                                 struct MinentNet **out);

/**
 * Load a checkpoint directory written by the trainer.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
 */
enum MinentStatus minent_net_load_checkpoint(const char *path, struct MinentNet **out);

/**
 * # Safety
 * `net` must come from this library and not be used afterwards.
 */
void minent_net_free(struct MinentNet *net);

/**
 * Input width and class count.
 *
 * # Safety
 * `net` must be a live handle; out-pointers must be writable.
 */
enum MinentStatus minent_net_shape(const struct MinentNet *net,
                                   size_t *input_dim,
                                   size_t *num_classes);

/**
 * Copy of the network's loss head.
 *
 * # Safety
 * `net` must be a live handle; `out` must be writable.
 */
enum MinentStatus minent_net_loss_params(const struct MinentNet *net,
                                         struct MinentLossParams **out);

/**
 * Eval-mode logits for `n` row-major samples into `logits` (`n * K`).
 *
 * # Safety
 * `inputs` must be valid for `n * input_dim` doubles and `logits` for
 * `n * num_classes`.
 */
enum MinentStatus minent_net_predict(const struct MinentNet *net,
                                     const double *inputs_ptr,
                                     size_t n,
                                     double *logits);

/**
 * Accuracy (percent) and mean prediction entropy (nats) on `n` samples.
 *
 * # Safety
 * `inputs` must be valid for `n * input_dim` doubles and `labels` for `n`
 * entries; out-pointers must be writable.
 */
enum MinentStatus minent_net_evaluate(const struct MinentNet *net,
                                      const double *inputs_ptr,
                                      const uint32_t *labels,
                                      size_t n,
                                      double *accuracy,
                                      double *mean_entropy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MINENT_H */
