#ifndef TRANSFER_CURATE_H
#define TRANSFER_CURATE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum TcStatus {
  TC_STATUS_OK = 0,
  TC_STATUS_NULL_POINTER = 1,
  TC_STATUS_INVALID_ARGUMENT = 2,
  TC_STATUS_IO = 3,
  TC_STATUS_UNREACHABLE = 4,
  TC_STATUS_DIGEST_MISMATCH = 5,
  TC_STATUS_PANIC = 6,
} TcStatus;

typedef enum TcMetric {
  TC_METRIC_EUCLIDEAN = 0,
  TC_METRIC_COSINE = 1,
} TcMetric;

/*
 The outcome of a query-balanced curation.
 */
typedef struct TcCuration TcCuration;

/*
 An embedding store opened from disk or built from caller memory.
 */
typedef struct TcStore TcStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer
 stays valid until the next failing call on the same thread.
 */
const char *tc_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *tc_version(void);

/*
 Opens a store file (and its `.meta.jsonl` sidecar).

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum TcStatus tc_store_open(const char *path, struct TcStore **out);

/*
 Builds an in-memory store from `count × dim` row-major floats. `ids` may
 be null (ids become `0..count`); otherwise it holds `count` strictly
 increasing ids.

 # Safety
 `rows` must hold `count * dim` floats, `ids` null or `count` ids; `out` writable.
 */
enum TcStatus tc_store_from_rows(const float *rows,
                                 size_t count,
                                 size_t dim,
                                 const uint64_t *ids,
                                 bool normalized,
                                 struct TcStore **out);

/*
 Releases a store; null is ignored.

 # Safety
 `store` must come from this library and not be used afterwards.
 */
void tc_store_free(struct TcStore *store);

/*
 Number of rows, or 0 for null.

 # Safety
 `store` must be null or a live store handle.
 */
size_t tc_store_count(const struct TcStore *store);

/*
 Row width, or 0 for null.

 # Safety
 `store` must be null or a live store handle.
 */
size_t tc_store_dim(const struct TcStore *store);

/*
 Copies row `row` into `out`, which must hold `tc_store_dim` floats.

 # Safety
 `store` must be a live handle; `out` must hold `len` floats.
 */
enum TcStatus tc_store_row(const struct TcStore *store, size_t row, float *out, size_t len);

/*
 Item id of row `row`.

 # Safety
 `store` must be a live handle; `out` writable.
 */
enum TcStatus tc_store_item_id(const struct TcStore *store, size_t row, uint64_t *out);

/*
 The `k` nearest gallery items to one query vector of length `dim`, best
 first. `out_scores` may be null.

 # Safety
 `query` must hold `dim` floats, `out_ids` (and `out_scores` if non-null) `k` elements.
 */
enum TcStatus tc_top_k(const struct TcStore *gallery,
                       const float *query,
                       size_t dim,
                       size_t k,
                       enum TcMetric metric,
                       uint64_t *out_ids,
                       double *out_scores);

/*
 Query-balanced selection of `n` gallery items.

 # Safety
 Both stores must be live handles; `out` writable.
 */
enum TcStatus tc_curate_query_balanced(const struct TcStore *queries,
                                       const struct TcStore *gallery,
                                       size_t n,
                                       uint64_t seed,
                                       enum TcMetric metric,
                                       struct TcCuration **out);

/*
 Number of selected items, or 0 for null.

 # Safety
 `c` must be null or a live curation handle.
 */
size_t tc_curation_len(const struct TcCuration *c);

/*
 Final neighbor depth, or 0 for null.

 # Safety
 `c` must be null or a live curation handle.
 */
size_t tc_curation_k_final(const struct TcCuration *c);

/*
 Copies the selected ids (ordered by best rank, then id); `len` must equal `tc_curation_len`.

 # Safety
 `c` must be a live handle and `out` hold `len` ids.
 */
enum TcStatus tc_curation_ids(const struct TcCuration *c, uint64_t *out, size_t len);

/*
 Releases a curation result; null is ignored.

 # Safety
 `c` must come from this library and not be used afterwards.
 */
void tc_curation_free(struct TcCuration *c);

/*
 Temperature-scaled KD loss on `batch × classes` logits; `grad` (nullable)
 receives d loss / d student.

 # Safety
 `student`, `teacher` and non-null `grad` hold `batch * classes` doubles; `loss` writable.
 */
enum TcStatus tc_kd_kl_loss(const double *student,
                            const double *teacher,
                            size_t batch,
                            size_t classes,
                            double temperature,
                            double *loss,
                            double *grad);

/*
 Mean cross entropy of `batch × classes` logits against `labels`.

 # Safety
 `logits` and non-null `grad` hold `batch * classes` doubles, `labels` `batch` entries.
 */
enum TcStatus tc_cross_entropy(const double *logits,
                               const size_t *labels,
                               size_t batch,
                               size_t classes,
                               double *loss,
                               double *grad);

/*
 Symmetric InfoNCE between unit-norm `batch × dim` student and teacher
 embeddings; `grad` is with respect to the student rows.

 # Safety
 `student`, `teacher` and non-null `grad` hold `batch * dim` doubles; `loss` writable.
 */
enum TcStatus tc_info_nce(const double *student,
                          const double *teacher,
                          size_t batch,
                          size_t dim,
                          double temperature,
                          double *loss,
                          double *grad);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRANSFER_CURATE_H */
