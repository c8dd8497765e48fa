#ifndef CIFT_H
#define CIFT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  CIFT_STATUS_OK = 0,
  CIFT_STATUS_NULL_POINTER = 1,
  CIFT_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Bad configuration or checkpoint.
   */
  CIFT_STATUS_CONFIG = 3,
  /**
   * Unreadable, malformed or infeasible input data.
   */
  CIFT_STATUS_DATA = 4,
  /**
   * Shape, alignment or numerical failure.
   */
  CIFT_STATUS_NUMERICAL = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  CIFT_STATUS_PANIC = 6,
} CiftStatus;

typedef enum {
  CIFT_MODE_CIFT = 0,
  CIFT_MODE_RNNT_BASELINE = 1,
} CiftMode;

/**
 * Greedy hypothesis of one utterance.
 */
typedef struct CiftDecode CiftDecode;

/**
 * Output of integrate-and-fire on raw arrays.
 */
typedef struct CiftFire CiftFire;

/**
 * A loaded checkpoint.
 */
typedef struct CiftModel CiftModel;

typedef struct {
  /**
   * A [`CiftMode`] value.
   */
  uint32_t mode;
  size_t vocab;
  size_t feat_dim;
  size_t d_model;
  size_t num_parameters;
} CiftModelInfo;

/**
 * One threshold crossing: `first + second == available`.
 */
typedef struct {
  size_t frame;
  double available;
  double first;
  double second;
} CiftBoundary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cift_version(void);

/**
 * Message of the most recent failure on this thread (empty after a
 * success). Valid until the next call into the library on this thread.
 */
const char *cift_last_error(void);

/**
 * Loads a checkpoint written by `cift train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
CiftStatus cift_model_load(const char *path, CiftModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`cift_model_load`] not yet freed.
 */
void cift_model_free(CiftModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
CiftStatus cift_model_info(const CiftModel *model, CiftModelInfo *out);

/**
 * Greedy decoding of one utterance given row-major `features`
 * (`frames × feat_dim`).
 *
 * # Safety
 * `features` must hold `frames * feat_dim` doubles; `out` must be writable.
 */
CiftStatus cift_model_decode(const CiftModel *model,
                             const double *features,
                             size_t frames,
                             size_t feat_dim,
                             CiftDecode **out);

/**
 * Number of emitted tokens.
 *
 * # Safety
 * `d` must be null or a live handle.
 */
size_t cift_decode_len(const CiftDecode *d);

/**
 * Token ids, `cift_decode_len` entries; owned by the handle.
 *
 * # Safety
 * `d` must be null or a live handle.
 */
const uint32_t *cift_decode_tokens(const CiftDecode *d);

/**
 * Encoder frame of each token.
 *
 * # Safety
 * `d` must be null or a live handle.
 */
const size_t *cift_decode_frames(const CiftDecode *d);

/**
 * Probability of each emitted token.
 *
 * # Safety
 * `d` must be null or a live handle.
 */
const double *cift_decode_top1(const CiftDecode *d);

/**
 * Embeddings fired at inference (0 for the baseline).
 *
 * # Safety
 * `d` must be null or a live handle.
 */
size_t cift_decode_fire_count(const CiftDecode *d);

/**
 * # Safety
 * `d` must be null or a handle not yet freed.
 */
void cift_decode_free(CiftDecode *d);

/**
 * Integrate-and-fire over `h` (`frames × dim`, row-major) and `alpha`
 * (`frames`). A negative `target_len` selects inference firing with the
 * given `tail_threshold`; otherwise exactly `target_len` cells are fired
 * from weights that must already sum to it.
 *
 * # Safety
 * Array arguments must hold the stated number of doubles; `out` writable.
 */
CiftStatus cift_cif_fire(const double *h,
                         const double *alpha,
                         size_t frames,
                         size_t dim,
                         double beta,
                         int64_t target_len,
                         double tail_threshold,
                         CiftFire **out);

/**
 * # Safety
 * `f` must be null or a live handle.
 */
size_t cift_fire_count(const CiftFire *f);

/**
 * Fired embeddings, `count × dim` row-major; owned by the handle.
 *
 * # Safety
 * `f` must be null or a live handle.
 */
const double *cift_fire_embeddings(const CiftFire *f);

/**
 * Embedding width the handle was built with.
 *
 * # Safety
 * `f` must be null or a live handle.
 */
size_t cift_fire_dim(const CiftFire *f);

/**
 * Threshold crossings; writes their number to `len`.
 *
 * # Safety
 * `f` must be null or a live handle; `len` must be writable.
 */
const CiftBoundary *cift_fire_boundaries(const CiftFire *f, size_t *len);

/**
 * Weight left accumulated after the last crossing.
 *
 * # Safety
 * `f` must be null or a live handle.
 */
double cift_fire_residue(const CiftFire *f);

/**
 * Weight assigned to fired cells, excluding a fired tail.
 *
 * # Safety
 * `f` must be null or a live handle.
 */
double cift_fire_consumed(const CiftFire *f);

/**
 * # Safety
 * `f` must be null or a handle not yet freed.
 */
void cift_fire_free(CiftFire *f);

/**
 * CTC negative log-likelihood over `logits` (`frames × classes`, blank is
 * the last class). `grad`, when not null, receives `frames × classes`
 * gradient values.
 *
 * # Safety
 * Arrays must hold the stated sizes; `loss` writable.
 */
CiftStatus cift_ctc_loss(const double *logits,
                         size_t frames,
                         size_t classes,
                         const uint32_t *targets,
                         size_t num_targets,
                         double *loss,
                         double *grad);

/**
 * Transducer negative log-likelihood over `logits`
 * (`frames × (num_targets + 1) × classes`, blank last). `grad` as for
 * [`cift_ctc_loss`].
 *
 * # Safety
 * Arrays must hold the stated sizes; `loss` writable.
 */
CiftStatus cift_rnnt_loss(const double *logits,
                          size_t frames,
                          size_t classes,
                          const uint32_t *targets,
                          size_t num_targets,
                          double *loss,
                          double *grad);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CIFT_H */
