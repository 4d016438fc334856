#ifndef UNLEARN_FORGE_H
#define UNLEARN_FORGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. The non-zero codes 2-4 match the CLI exit codes.
 */
typedef enum UfStatus {
  UF_STATUS_OK = 0,
  UF_STATUS_FAILED = 1,
  UF_STATUS_CONFIG = 2,
  UF_STATUS_MISSING_ARTIFACT = 3,
  UF_STATUS_NUMERIC = 4,
  UF_STATUS_HASH_MISMATCH = 5,
  UF_STATUS_NULL_POINTER = 6,
  UF_STATUS_INVALID_ARGUMENT = 7,
  UF_STATUS_PANIC = 8,
} UfStatus;

/**
 * A trained denoiser with its noise schedule.
 */
typedef struct UfSnapshot UfSnapshot;

/**
 * A concept table.
 */
typedef struct UfTable UfTable;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *uf_version(void);

/**
 * Message of the last failed call on this thread (empty after a success). Returns the
 * buffer size needed; pass `buf = NULL` to query it.
 *
 * # Safety
 * `buf` must be NULL or point to at least `len` writable bytes.
 */
size_t uf_last_error_message(char *buf, size_t len);

/**
 * The default five-concept table for embedding seed `seed`.
 *
 * # Safety
 * `out` must be a valid pointer; on success it receives a handle to free with
 * [`uf_table_free`].
 */
enum UfStatus uf_table_default(uint64_t seed, struct UfTable **out);

/**
 * Parses and validates a table from its JSON form.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum UfStatus uf_table_from_json(const char *json, struct UfTable **out);

/**
 * # Safety
 * `table` must be NULL or a handle from this library not yet freed.
 */
void uf_table_free(struct UfTable *table);

/**
 * Number of concepts, or 0 for a NULL handle.
 *
 * # Safety
 * `table` must be NULL or a live handle.
 */
size_t uf_table_len(const struct UfTable *table);

/**
 * Writes the id of concept `index` into `buf`; `needed` receives the size including the
 * terminator.
 *
 * # Safety
 * `table` must be a live handle, `buf` NULL or `len` writable bytes, `needed` NULL or valid.
 */
enum UfStatus uf_table_concept_id(const struct UfTable *table,
                                  size_t index,
                                  char *buf,
                                  size_t len,
                                  size_t *needed);

/**
 * Index of a concept id, through `out_index`.
 *
 * # Safety
 * `table` must be a live handle, `id` a NUL-terminated string, `out_index` valid.
 */
enum UfStatus uf_table_index_of(const struct UfTable *table, const char *id, size_t *out_index);

/**
 * Table index of the Bayes class of each of the `n` points.
 *
 * # Safety
 * `table` must be a live handle, `points` hold `2 n` values and `out` room for `n`.
 */
enum UfStatus uf_table_classify(const struct UfTable *table,
                                const double *points,
                                size_t n,
                                size_t *out);

/**
 * Loads a checkpoint and its sidecar, checking them against `table`.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `table` a live handle, `out` valid.
 */
enum UfStatus uf_snapshot_load(const char *path,
                               const struct UfTable *table,
                               struct UfSnapshot **out);

/**
 * # Safety
 * `snapshot` must be NULL or a handle from this library not yet freed.
 */
void uf_snapshot_free(struct UfSnapshot *snapshot);

/**
 * Content id of the snapshot's parameters (16 hex digits).
 *
 * # Safety
 * `snapshot` must be a live handle, `buf` NULL or `len` writable bytes.
 */
enum UfStatus uf_snapshot_id(const struct UfSnapshot *snapshot, char *buf, size_t len);

/**
 * Draws `n` points from the model under the embedding of concept `concept`, writing
 * `2 n` values to `out`.
 *
 * # Safety
 * Handles must be live and `out` must have room for `2 n` doubles.
 */
enum UfStatus uf_snapshot_sample(const struct UfSnapshot *snapshot,
                                 const struct UfTable *table,
                                 size_t concept,
                                 size_t n,
                                 uint64_t seed,
                                 double *out);

/**
 * Concept-preserving projection of `gu` against `gr` (both of length `len`) into `out`.
 *
 * # Safety
 * All three arrays must hold `len` doubles; `out` may not alias the inputs.
 */
enum UfStatus uf_surgery(const double *gu,
                         const double *gr,
                         size_t len,
                         double lambda,
                         double *out);

/**
 * Fréchet distance between Gaussian fits of two point sets (each at least 3 points).
 *
 * # Safety
 * `a` must hold `2 na` doubles, `b` `2 nb`, and `out` be valid.
 */
enum UfStatus uf_frechet(const double *a, size_t na, const double *b, size_t nb, double *out);

/**
 * Gaussian-kernel MMD between two point sets. `bandwidth <= 0` selects the median
 * heuristic.
 *
 * # Safety
 * `a` must hold `2 na` doubles, `b` `2 nb`, and `out` be valid.
 */
enum UfStatus uf_mmd(const double *a,
                     size_t na,
                     const double *b,
                     size_t nb,
                     double bandwidth,
                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNLEARN_FORGE_H */
