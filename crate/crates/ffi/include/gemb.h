#ifndef GEMB_H
#define GEMB_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define GEMB_OK 0

/**
 * A required pointer was null or a string was not UTF-8.
 */
#define GEMB_ERR_ARGUMENT 1

/**
 * Bad input data: malformed files, zero vectors, unknown ids, wrong widths.
 */
#define GEMB_ERR_INPUT 2

#define GEMB_ERR_IO 3

#define GEMB_ERR_CONFIG 4

#define GEMB_ERR_INCOMPATIBLE 5

#define GEMB_ERR_NUMERICAL 6

/**
 * The caller's output buffer is smaller than required.
 */
#define GEMB_ERR_BUFFER 7

#define GEMB_ERR_PANIC 8

/**
 * A retrieval index over unit-normalized document embeddings.
 */
typedef struct GembIndex GembIndex;

/**
 * A loaded encoder.
 */
typedef struct GembModel GembModel;

/**
 * One search result. `row` indexes the document id via [`gemb_index_id`].
 */
typedef struct GembHit {
  size_t row;
  double score;
} GembHit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failed call on this thread; empty after a
 * successful call. Valid until the next `gemb_*` call on the same thread.
 */
const char *gemb_last_error(void);

/**
 * Loads a checkpoint file into a new model handle.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
int32_t gemb_model_load(const char *path, struct GembModel **out);

/**
 * # Safety
 * `model` must come from [`gemb_model_load`] and not be freed twice. Null is ignored.
 */
void gemb_model_free(struct GembModel *model);

/**
 * Full embedding width of the model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t gemb_model_dim(const struct GembModel *model);

/**
 * Embeds one text into `out[0..dim]`, unit-normalized. `dim` 0 means the
 * full width; otherwise it must be one of the model's nested widths. `task`
 * may be null. `as_query` nonzero selects the query-side modality marker.
 *
 * # Safety
 * `model` must be a live handle, `text` a valid C string, `task` null or a
 * valid C string, and `out` must point at `out_len` writable doubles.
 */
int32_t gemb_model_embed(const struct GembModel *model,
                         const char *text,
                         const char *task,
                         int32_t as_query,
                         size_t dim,
                         double *out,
                         size_t out_len);

/**
 * Builds an index from `n` row-major embeddings of width `dim`. Rows are
 * normalized; zero rows and duplicate ids are rejected.
 *
 * # Safety
 * `ids` must hold `n` valid C strings, `embeddings` `n * dim` doubles, and
 * `out` must be a valid pointer.
 */
int32_t gemb_index_build(const char *const *ids,
                         const double *embeddings,
                         size_t n,
                         size_t dim,
                         struct GembIndex **out);

/**
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
int32_t gemb_index_load(const char *path, struct GembIndex **out);

/**
 * # Safety
 * `index` must be a live handle and `path` a valid C string.
 */
int32_t gemb_index_save(const struct GembIndex *index, const char *path);

/**
 * # Safety
 * `index` must come from a `gemb_index_*` constructor and not be freed twice.
 */
void gemb_index_free(struct GembIndex *index);

/**
 * # Safety
 * `index` must be null or a live handle.
 */
size_t gemb_index_len(const struct GembIndex *index);

/**
 * # Safety
 * `index` must be null or a live handle.
 */
size_t gemb_index_dim(const struct GembIndex *index);

/**
 * Document id of `row`, or null when out of range. The string lives as long
 * as the index.
 *
 * # Safety
 * `index` must be null or a live handle.
 */
const char *gemb_index_id(const struct GembIndex *index, size_t row);

/**
 * Top-`k` cosine search. Writes up to `k` hits (best first; ties broken by
 * ascending id) and stores the count in `n_hits`.
 *
 * # Safety
 * `index` must be a live handle, `query` must hold `dim` doubles, `hits`
 * must have room for `k` entries, and `n_hits` must be a valid pointer.
 */
int32_t gemb_index_search(const struct GembIndex *index,
                          const double *query,
                          size_t dim,
                          size_t k,
                          struct GembHit *hits,
                          size_t *n_hits);

/**
 * Writes the weighted average of `n` checkpoints to `out_path`. Weights must
 * be finite, non-negative and not all zero.
 *
 * # Safety
 * `paths` must hold `n` valid C strings, `weights` `n` doubles, and
 * `out_path` must be a valid C string.
 */
int32_t gemb_soup(const char *const *paths, const double *weights, size_t n, const char *out_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEMB_H */
