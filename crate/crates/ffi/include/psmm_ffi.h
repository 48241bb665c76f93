#ifndef PSMM_FFI_H
#define PSMM_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum PsmmStatus {
  PSMM_STATUS_OK = 0,
  PSMM_STATUS_NULL_POINTER = 1,
  PSMM_STATUS_INVALID_ARGUMENT = 2,
  PSMM_STATUS_IO = 3,
  PSMM_STATUS_DATA = 4,
  PSMM_STATUS_NUMERIC = 5,
  PSMM_STATUS_PANIC = 6,
} PsmmStatus;

/*
 Trained network with its parameters.
 */
typedef struct PsmmModel PsmmModel;

/*
 Rank-pooling solver for a fixed window length.
 */
typedef struct PsmmRankPool PsmmRankPool;

/*
 Growing set of labelled scores.
 */
typedef struct PsmmScoredSet PsmmScoredSet;

/*
 APCER, BPCER and ACER at one threshold.
 */
typedef struct PsmmRates {
  double apcer;
  double bpcer;
  double acer;
} PsmmRates;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer
 stays valid until the next failing call on the same thread.
 */
const char *psmm_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *psmm_version(void);

/*
 Creates a solver for windows of `window` frames (at least 2).

 # Safety
 `out` must be a valid pointer to writable storage for one handle.
 */
enum PsmmStatus psmm_rank_pool_new(size_t window, struct PsmmRankPool **out);

/*
 Dynamic image of `window` consecutive frames of `frame_len` values each,
 stored back to back in `frames`. Prefix means are taken internally.
 Writes `frame_len` values to `out_d` and, if non-null, the objective to
 `out_objective`.

 # Safety
 `frames` must hold `window * frame_len` readable values and `out_d`
 `frame_len` writable values.
 */
enum PsmmStatus psmm_rank_pool_fit(const struct PsmmRankPool *pool,
                                   const double *frames,
                                   size_t frame_len,
                                   double *out_d,
                                   double *out_objective);

/*
 # Safety
 `pool` must come from [`psmm_rank_pool_new`] and not be used afterwards.
 */
void psmm_rank_pool_free(struct PsmmRankPool *pool);

/*
 Creates an empty scored set; never returns null.
 */
struct PsmmScoredSet *psmm_scored_set_new(void);

/*
 Appends one score; `bona_fide` non-zero marks a genuine presentation.

 # Safety
 `set` must be a live handle from [`psmm_scored_set_new`].
 */
enum PsmmStatus psmm_scored_set_push(struct PsmmScoredSet *set, double score, int32_t bona_fide);

/*
 Number of scores in the set, 0 for a null handle.

 # Safety
 `set` must be null or a live handle.
 */
size_t psmm_scored_set_len(const struct PsmmScoredSet *set);

/*
 Error rates with scores at or above `threshold` accepted as bona fide.

 # Safety
 `set` must be a live handle and `out` writable.
 */
enum PsmmStatus psmm_scored_set_rates(const struct PsmmScoredSet *set,
                                      double threshold,
                                      struct PsmmRates *out);

/*
 Area under the ROC curve.

 # Safety
 `set` must be a live handle and `out` writable.
 */
enum PsmmStatus psmm_scored_set_auc(const struct PsmmScoredSet *set, double *out);

/*
 Largest true-positive rate over ROC points with FPR at most `fpr`.

 # Safety
 `set` must be a live handle and `out` writable.
 */
enum PsmmStatus psmm_scored_set_tpr_at_fpr(const struct PsmmScoredSet *set,
                                           double fpr,
                                           double *out);

/*
 # Safety
 `set` must come from [`psmm_scored_set_new`] and not be used afterwards.
 */
void psmm_scored_set_free(struct PsmmScoredSet *set);

/*
 Loads `model.cfg` and `model.ckpt` from directory `dir`.

 # Safety
 `dir` must be a NUL-terminated UTF-8 path and `out` writable.
 */
enum PsmmStatus psmm_model_load(const char *dir, struct PsmmModel **out);

/*
 Side length of the square inputs the model expects.

 # Safety
 `model` must be null or a live handle.
 */
size_t psmm_model_input_size(const struct PsmmModel *model);

/*
 Number of modality inputs; their order is colour, depth, IR restricted
 to the modalities the model uses.

 # Safety
 `model` must be null or a live handle.
 */
size_t psmm_model_num_modalities(const struct PsmmModel *model);

/*
 Channel count of modality input `index` (3 for colour, 1 otherwise), or 0
 when out of range.

 # Safety
 `model` must be null or a live handle.
 */
size_t psmm_model_channels(const struct PsmmModel *model, size_t index);

/*
 Liveness score in `[0, 1]` of one sample. `static_imgs[i]` and
 `dynamic_imgs[i]` point to `C × S × S` values (channel-major) for the
 model's `i`-th modality; `count` must equal the number of modalities.

 # Safety
 The pointer arrays must hold `count` pointers, each to enough readable
 values, and `out` must be writable.
 */
enum PsmmStatus psmm_model_score(const struct PsmmModel *model,
                                 const double *const *static_imgs,
                                 const double *const *dynamic_imgs,
                                 size_t count,
                                 double *out);

/*
 # Safety
 `model` must come from [`psmm_model_load`] and not be used afterwards.
 */
void psmm_model_free(struct PsmmModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PSMM_FFI_H */
