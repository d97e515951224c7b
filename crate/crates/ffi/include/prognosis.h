#ifndef PROGNOSIS_H
#define PROGNOSIS_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define PROGNOSIS_LABEL_POOR 0

#define PROGNOSIS_LABEL_FAIR 1

#define PROGNOSIS_LABEL_GOOD 2

#define PROGNOSIS_LABEL_EXCELLENT 3

typedef enum PrognosisStatus {
  PROGNOSIS_STATUS_OK = 0,
  PROGNOSIS_STATUS_NULL_POINTER = 1,
  PROGNOSIS_STATUS_INVALID_UTF8 = 2,
  PROGNOSIS_STATUS_INVALID_ARGUMENT = 3,
  PROGNOSIS_STATUS_VALIDATION = 4,
  PROGNOSIS_STATUS_NOT_FOUND = 5,
  PROGNOSIS_STATUS_IO = 6,
  PROGNOSIS_STATUS_BACKEND = 7,
  PROGNOSIS_STATUS_PANIC = 8,
} PrognosisStatus;

/**
 * Opaque prediction engine.
 */
typedef struct PrognosisEngine PrognosisEngine;

/**
 * Opaque loaded vector index with a matching local embedder.
 */
typedef struct PrognosisIndex PrognosisIndex;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer is
 * valid until the next library call on the same thread.
 */
const char *prognosis_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a pointer previously returned by this library and not yet freed.
 */
void prognosis_string_free(char *s);

/**
 * Creates an engine from a TOML config file, or from defaults and the
 * environment when `config_path` is null.
 *
 * # Safety
 * `config_path` must be null or a valid C string; `out` must be writable.
 */
enum PrognosisStatus prognosis_engine_new(const char *config_path, struct PrognosisEngine **out);

/**
 * # Safety
 * `engine` must be null or a handle from [`prognosis_engine_new`] not yet freed.
 */
void prognosis_engine_free(struct PrognosisEngine *engine);

/**
 * Predicts one case bundle given as JSON. `variant` may be null (full);
 * a negative `k` uses the configured default. Writes the result JSON to `out_json`.
 *
 * # Safety
 * Pointers must be valid; `variant` may be null.
 */
enum PrognosisStatus prognosis_predict(const struct PrognosisEngine *engine,
                                       const char *case_json,
                                       const char *variant,
                                       int64_t k,
                                       char **out_json);

/**
 * Writes the indicator schema as a JSON array to `out_json`.
 *
 * # Safety
 * `out_json` must be writable.
 */
enum PrognosisStatus prognosis_schema_json(char **out_json);

/**
 * Maps a LEFS score (0..=80) to a label code.
 *
 * # Safety
 * `out_label` must be writable.
 */
enum PrognosisStatus prognosis_lefs_label(int32_t score, int32_t *out_label);

/**
 * Maps an Enneking score (0..=30) to a label code.
 *
 * # Safety
 * `out_label` must be writable.
 */
enum PrognosisStatus prognosis_enneking_label(int32_t score, int32_t *out_label);

/**
 * Macro-F1 over `n` paired label codes.
 *
 * # Safety
 * `reference` and `predicted` must each point to `n` readable values.
 */
enum PrognosisStatus prognosis_macro_f1(const int32_t *reference,
                                        const int32_t *predicted,
                                        size_t n,
                                        double *out_f1);

/**
 * Softmax probability of `chosen` given four label log-likelihoods in
 * Poor, Fair, Good, Excellent order.
 *
 * # Safety
 * `scores` must point to four readable values.
 */
enum PrognosisStatus prognosis_confidence(const double *scores,
                                          int32_t chosen,
                                          double *out_confidence);

/**
 * Loads a saved index. Queries are embedded with the local hash embedder
 * at the index's dimension.
 *
 * # Safety
 * `path` must be a valid C string; `out` must be writable.
 */
enum PrognosisStatus prognosis_index_load(const char *path, struct PrognosisIndex **out);

/**
 * # Safety
 * `index` must be null or a handle from [`prognosis_index_load`] not yet freed.
 */
void prognosis_index_free(struct PrognosisIndex *index);

/**
 * Number of entries in a loaded index.
 *
 * # Safety
 * `index` must be a live handle; `out_len` must be writable.
 */
enum PrognosisStatus prognosis_index_len(const struct PrognosisIndex *index, size_t *out_len);

/**
 * Top-`k` passages for a free-text query, as a JSON array.
 *
 * # Safety
 * Pointers must be valid; `out_json` must be writable.
 */
enum PrognosisStatus prognosis_index_search(const struct PrognosisIndex *index,
                                            const char *query,
                                            size_t k,
                                            char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROGNOSIS_H */
