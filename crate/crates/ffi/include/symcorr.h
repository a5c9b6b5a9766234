#ifndef SYMCORR_H
#define SYMCORR_H

#include <stddef.h>
#include <stdint.h>

typedef enum SymcorrPruneAlgorithm {
  SYMCORR_PRUNE_ALGORITHM_GREEDY = 0,
  SYMCORR_PRUNE_ALGORITHM_TOP_K = 1,
} SymcorrPruneAlgorithm;

typedef enum SymcorrScale {
  // Divide logits by the square root of the feature dim.
  SYMCORR_SCALE_SQRT_D = 0,
  // Divide logits by the feature dim.
  SYMCORR_SCALE_D = 1,
} SymcorrScale;

typedef enum SymcorrStatus {
  SYMCORR_STATUS_OK = 0,
  SYMCORR_STATUS_NULL_POINTER = 1,
  SYMCORR_STATUS_SHAPE = 2,
  SYMCORR_STATUS_CONTRACT = 3,
  SYMCORR_STATUS_FORMAT = 4,
  SYMCORR_STATUS_CONFIG = 5,
  SYMCORR_STATUS_IO = 6,
  SYMCORR_STATUS_EVALUATION = 7,
  SYMCORR_STATUS_NON_FINITE = 8,
  SYMCORR_STATUS_DEGENERATE_ROW = 9,
  SYMCORR_STATUS_INVALID_UTF8 = 10,
  SYMCORR_STATUS_PANIC = 11,
} SymcorrStatus;

// Attention of query tokens over concatenated support tokens.
typedef struct SymcorrAttention SymcorrAttention;

// Per-layer token matrices of one image.
typedef struct SymcorrLayerStack SymcorrLayerStack;

// Shared magnitude/direction projector.
typedef struct SymcorrProjector SymcorrProjector;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty if none. The
// pointer stays valid until the next failing call on the same thread.
const char *symcorr_last_error_message(void);

// Projector `f(x) = (x·W1 + b1) ⊙ unit(x·W2 + b2)`; weights are `dim x dim`,
// biases `dim`.
//
// # Safety
// Array arguments must point to the stated number of doubles; `out` must
// be writable.
enum SymcorrStatus symcorr_projector_new(size_t dim,
                                         const double *f1_weight,
                                         const double *f1_bias,
                                         const double *f2_weight,
                                         const double *f2_bias,
                                         struct SymcorrProjector **out);

// Projector whose magnitude branch is the given map and whose direction
// branch has zero weights and unit biases.
//
// # Safety
// As for [`symcorr_projector_new`].
enum SymcorrStatus symcorr_projector_warm_start(size_t dim,
                                                const double *weight,
                                                const double *bias,
                                                struct SymcorrProjector **out);

// # Safety
// `p` must come from a projector constructor and not be used afterwards.
void symcorr_projector_free(struct SymcorrProjector *p);

// Symmetric Correlation attention of `query` (`query_tokens x dim`) over
// the supports stacked in `supports`; support `i` has `support_tokens[i]`
// rows.
//
// # Safety
// Pointers must be valid for the stated sizes; `out` must be writable.
enum SymcorrStatus symcorr_symmetric_attention(const struct SymcorrProjector *projector,
                                               const double *query,
                                               size_t query_tokens,
                                               const double *supports,
                                               const size_t *support_tokens,
                                               size_t n_supports,
                                               size_t dim,
                                               enum SymcorrScale scale,
                                               struct SymcorrAttention **out);

// # Safety
// `a` must be a live attention handle; `rows` and `cols` writable.
enum SymcorrStatus symcorr_attention_shape(const struct SymcorrAttention *a,
                                           size_t *rows,
                                           size_t *cols);

// Copies the attention weights; `len` must equal rows × cols.
//
// # Safety
// `out` must hold `len` doubles.
enum SymcorrStatus symcorr_attention_values(const struct SymcorrAttention *a,
                                            double *out,
                                            size_t len);

// # Safety
// `a` must come from an attention constructor and not be used afterwards.
void symcorr_attention_free(struct SymcorrAttention *a);

// Contribution index of every support; `len` must equal the number of
// supports.
//
// # Safety
// `out` must hold `len` doubles.
enum SymcorrStatus symcorr_contribution_index(const struct SymcorrAttention *a,
                                              double *out,
                                              size_t len);

// Contribution of support `designated` minus the mean of the others.
//
// # Safety
// `out` must be writable.
enum SymcorrStatus symcorr_deviation(const struct SymcorrAttention *a,
                                     size_t designated,
                                     double *out);

// Pruning score of every support: projected mean support token dotted
// with the projected mean query token.
//
// # Safety
// Same layout as [`symcorr_symmetric_attention`]; `terms` holds
// `n_supports` doubles.
enum SymcorrStatus symcorr_prune_terms(const struct SymcorrProjector *projector,
                                       const double *query,
                                       size_t query_tokens,
                                       const double *supports,
                                       const size_t *support_tokens,
                                       size_t n_supports,
                                       size_t dim,
                                       double *terms);

// Selects `n_prime` of `n` supports by their terms. `selected` receives
// indices in selection order.
//
// # Safety
// `terms` holds `n` doubles, `selected` holds `n_prime` entries,
// `objective` and `evaluations` are writable.
enum SymcorrStatus symcorr_prune_select(const double *terms,
                                        size_t n,
                                        size_t n_prime,
                                        enum SymcorrPruneAlgorithm algorithm,
                                        size_t *selected,
                                        double *objective,
                                        size_t *evaluations);

// Stack of `n_layers` layers sharing `dim` columns; layer `l` has
// `rows[l]` tokens, a perfect square. `data` holds the layers one after
// another.
//
// # Safety
// `rows` holds `n_layers` entries and `data` the sum of `rows[l] * dim`
// doubles; `out` must be writable.
enum SymcorrStatus symcorr_layer_stack_new(size_t n_layers,
                                           const size_t *rows,
                                           size_t dim,
                                           const double *data,
                                           struct SymcorrLayerStack **out);

// Reads an `FTS1` feature file.
//
// # Safety
// `file` must be a NUL-terminated UTF-8 path; `out` must be writable.
enum SymcorrStatus symcorr_layer_stack_read(const char *file, struct SymcorrLayerStack **out);

// Writes an `FTS1` feature file. Values must be representable as `float`.
//
// # Safety
// `file` must be a NUL-terminated UTF-8 path.
enum SymcorrStatus symcorr_layer_stack_write(const struct SymcorrLayerStack *stack,
                                             const char *file);

// # Safety
// `out` must be writable.
enum SymcorrStatus symcorr_layer_stack_len(const struct SymcorrLayerStack *stack, size_t *out);

// # Safety
// `rows` and `cols` must be writable.
enum SymcorrStatus symcorr_layer_stack_shape(const struct SymcorrLayerStack *stack,
                                             size_t layer,
                                             size_t *rows,
                                             size_t *cols);

// Copies layer `layer`; `len` must equal its rows × cols.
//
// # Safety
// `out` must hold `len` doubles.
enum SymcorrStatus symcorr_layer_stack_copy(const struct SymcorrLayerStack *stack,
                                            size_t layer,
                                            double *out,
                                            size_t len);

// # Safety
// `stack` must come from a layer-stack constructor and not be used
// afterwards.
void symcorr_layer_stack_free(struct SymcorrLayerStack *stack);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SYMCORR_H */
