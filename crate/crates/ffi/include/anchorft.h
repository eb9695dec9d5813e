#ifndef ANCHORFT_H
#define ANCHORFT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by all functions.
 */
typedef enum AftStatus {
  AFT_STATUS_OK = 0,
  AFT_STATUS_NULL_POINTER = 1,
  AFT_STATUS_INVALID_ARGUMENT = 2,
  AFT_STATUS_DEGENERATE = 3,
  AFT_STATUS_NUMERICAL = 4,
  AFT_STATUS_IO = 5,
  AFT_STATUS_FORMAT = 6,
  AFT_STATUS_PANIC = 7,
} AftStatus;

typedef enum AftActivation {
  AFT_ACTIVATION_TANH = 0,
  AFT_ACTIVATION_GELU = 1,
} AftActivation;

/**
 * Opaque encoder handle: architecture plus current parameters.
 */
typedef struct AftEncoder AftEncoder;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *aft_last_error_message(void);

/**
 * Creates an encoder with freshly initialized parameters.
 *
 * # Safety
 * `hidden_dims` must point to `num_hidden` values (or be null when it is 0);
 * `out` must point to writable storage for one pointer.
 */
enum AftStatus aft_encoder_new(size_t input_dim,
                               const size_t *hidden_dims,
                               size_t num_hidden,
                               size_t embed_dim,
                               enum AftActivation activation,
                               uint64_t init_seed,
                               double init_scale,
                               struct AftEncoder **out);

/**
 * # Safety
 * `encoder` must come from [`aft_encoder_new`] and not be freed twice. Null is a no-op.
 */
void aft_encoder_free(struct AftEncoder *encoder);

/**
 * Number of parameters, or 0 for a null handle.
 *
 * # Safety
 * `encoder` must be null or a live handle.
 */
size_t aft_encoder_param_count(const struct AftEncoder *encoder);

/**
 * Embedding width, or 0 for a null handle.
 *
 * # Safety
 * `encoder` must be null or a live handle.
 */
size_t aft_encoder_embed_dim(const struct AftEncoder *encoder);

/**
 * Replaces the parameters; `len` must equal the parameter count.
 *
 * # Safety
 * `encoder` must be a live handle and `params` must point to `len` values.
 */
enum AftStatus aft_encoder_set_params(struct AftEncoder *encoder, const double *params, size_t len);

/**
 * Copies the parameters into `out`; `len` must equal the parameter count.
 *
 * # Safety
 * `encoder` must be a live handle and `out` must point to `len` writable values.
 */
enum AftStatus aft_encoder_get_params(const struct AftEncoder *encoder, double *out, size_t len);

/**
 * Loads a `params.bin` file written by the CLI.
 *
 * # Safety
 * `encoder` must be a live handle and `path` a nul-terminated UTF-8 string.
 */
enum AftStatus aft_encoder_load_params(struct AftEncoder *encoder, const char *path);

/**
 * Embeds `rows` inputs of width `input_dim` into `out` (`rows x embed_dim`).
 *
 * # Safety
 * `x` must hold `rows * input_dim` values and `out` `rows * embed_dim` writable values.
 */
enum AftStatus aft_encoder_forward(const struct AftEncoder *encoder,
                                   const double *x,
                                   size_t rows,
                                   double *out);

/**
 * Parameter drift penalty `(1/n) * ||theta_ft - theta_pre||^2`. `grad_out` may be null.
 *
 * # Safety
 * `theta_ft` and `theta_pre` must hold `n` values; a non-null `grad_out` must hold `n`.
 */
enum AftStatus aft_param_reg_loss(const double *theta_ft,
                                  const double *theta_pre,
                                  size_t n,
                                  double *loss_out,
                                  double *grad_out);

/**
 * Embedding distillation `(1/rows) * sum ||f_i - t_i||^2`. `grad_out` may be null.
 *
 * # Safety
 * `embeddings` and `targets` must hold `rows * dim` values; a non-null `grad_out` as well.
 */
enum AftStatus aft_embed_reg_loss(const double *embeddings,
                                  const double *targets,
                                  size_t rows,
                                  size_t dim,
                                  double *loss_out,
                                  double *grad_out);

/**
 * Cosine-classifier cross-entropy over `num_classes` prototypes (rows are re-normalized).
 *
 * # Safety
 * `embeddings` must hold `rows * dim` values, `labels` `rows` values and
 * `prototypes` `num_classes * dim` values.
 */
enum AftStatus aft_domain_loss(const double *embeddings,
                               size_t rows,
                               size_t dim,
                               const uint32_t *labels,
                               const double *prototypes,
                               size_t num_classes,
                               double logit_scale,
                               double *loss_out);

/**
 * Mean average precision at `k` over queries with at least one relevant index item.
 *
 * # Safety
 * Query buffers must hold `num_queries` rows (embeddings `num_queries * dim`),
 * index buffers `num_index` rows.
 */
enum AftStatus aft_map_at_k(const double *query_embeddings,
                            const uint64_t *query_labels,
                            const uint64_t *query_ids,
                            size_t num_queries,
                            const double *index_embeddings,
                            const uint64_t *index_labels,
                            const uint64_t *index_ids,
                            size_t num_index,
                            size_t dim,
                            size_t k,
                            double *out);

/**
 * Recall@1 where row `i` of `view_a` should retrieve row `i` of `view_b`.
 *
 * # Safety
 * Both views must hold `rows * dim` values.
 */
enum AftStatus aft_recall_at_1_paired(const double *view_a,
                                      const double *view_b,
                                      size_t rows,
                                      size_t dim,
                                      double *out);

/**
 * `out = (1 - alpha) * theta_pre + alpha * theta_ft`.
 *
 * # Safety
 * All three buffers must hold `n` values.
 */
enum AftStatus aft_wise_ft(const double *theta_pre,
                           const double *theta_ft,
                           size_t n,
                           double alpha,
                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ANCHORFT_H */
