#ifndef SCRAT_H
#define SCRAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SCRAT_OK 0

#define SCRAT_ERR_NULL -1

#define SCRAT_ERR_UTF8 -2

#define SCRAT_ERR_CONFIG -3

#define SCRAT_ERR_INPUT -4

#define SCRAT_ERR_RUNTIME -5

#define SCRAT_ERR_PANIC -6

#define SCRAT_MEMORY_FLAT 0

#define SCRAT_MEMORY_CLUSTERED 1

/**
 * Parsed and validated experiment config.
 */
typedef struct ScratConfig ScratConfig;

typedef struct ScratMemory ScratMemory;

typedef struct ScratObserver ScratObserver;

/**
 * Results of a grid run.
 */
typedef struct ScratResults ScratResults;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 */
const char *scrat_last_error(void);

/**
 * Library version as a static string.
 */
const char *scrat_version(void);

/**
 * Frees a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void scrat_string_free(char *s);

/**
 * Wilson score interval for `successes` out of `n`.
 *
 * # Safety
 * `lo` and `hi` must be valid for writes.
 */
int32_t scrat_wilson_interval(uint64_t successes, uint64_t n, double z, double *lo, double *hi);

/**
 * Parses and validates an experiment config document.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be valid for writes.
 */
int32_t scrat_config_parse(const char *json, struct ScratConfig **out);

/**
 * Replaces the seed range with `start..end`.
 *
 * # Safety
 * `config` must be a live handle.
 */
int32_t scrat_config_set_seeds(struct ScratConfig *config, uint64_t start, uint64_t end);

/**
 * The resolved config as JSON; free with `scrat_string_free`.
 *
 * # Safety
 * `config` must be a live handle; `out` must be valid for writes.
 */
int32_t scrat_config_echo(const struct ScratConfig *config, char **out);

/**
 * # Safety
 * `config` must be null or a handle from `scrat_config_parse`.
 */
void scrat_config_free(struct ScratConfig *config);

/**
 * Runs every cell of the grid on `jobs` workers (0 means one).
 *
 * # Safety
 * `config` must be a live handle; `out` must be valid for writes.
 */
int32_t scrat_run_grid(const struct ScratConfig *config, uint32_t jobs, struct ScratResults **out);

/**
 * Total and failed cell counts.
 *
 * # Safety
 * `results` must be a live handle; `total` and `failed` must be valid for writes.
 */
int32_t scrat_results_counts(const struct ScratResults *results, uint64_t *total, uint64_t *failed);

/**
 * One JSON run record per line, in (variant, seed) order.
 *
 * # Safety
 * `results` must be a live handle; `out` must be valid for writes.
 */
int32_t scrat_results_runs_jsonl(const struct ScratResults *results, char **out);

/**
 * Writes the full report directory.
 *
 * # Safety
 * `results` must be a live handle; `dir` a NUL-terminated path.
 */
int32_t scrat_results_write_report(struct ScratResults *results, const char *dir);

/**
 * # Safety
 * `results` must be null or a handle from `scrat_run_grid`.
 */
void scrat_results_free(struct ScratResults *results);

/**
 * Builds a store from a JSON array of episode records (as written by
 * the store's own serializer).
 *
 * # Safety
 * `episodes_json` must be a NUL-terminated string; `out` must be valid for writes.
 */
int32_t scrat_memory_from_json(int32_t variant,
                               const char *episodes_json,
                               struct ScratMemory **out);

/**
 * # Safety
 * `memory` must be a live handle; `len` and `probes` must be valid for writes.
 */
int32_t scrat_memory_stats(const struct ScratMemory *memory, uint64_t *len, uint64_t *probes);

/**
 * Runs a retrieval. `query_json` is a serialized query and `landmarks_json`
 * the current landmark list; the result is the retrieval as JSON.
 *
 * # Safety
 * `memory` must be a live handle; strings NUL-terminated; `out` valid for writes.
 */
int32_t scrat_memory_retrieve(struct ScratMemory *memory,
                              const char *query_json,
                              const char *landmarks_json,
                              char **out);

/**
 * # Safety
 * `memory` must be null or a handle from `scrat_memory_from_json`.
 */
void scrat_memory_free(struct ScratMemory *memory);

/**
 * Uniform observer belief with default kernels.
 *
 * # Safety
 * `out` must be valid for writes.
 */
int32_t scrat_observer_uniform(double diffusion_rate, struct ScratObserver **out);

/**
 * Applies one serialized observed event in place.
 *
 * # Safety
 * `belief` must be a live handle; `event_json` NUL-terminated.
 */
int32_t scrat_observer_update(struct ScratObserver *belief, const char *event_json);

/**
 * Mass on one grid cell.
 *
 * # Safety
 * `belief` must be a live handle; `out` valid for writes.
 */
int32_t scrat_observer_mass(const struct ScratObserver *belief,
                            uint32_t row,
                            uint32_t col,
                            double *out);

/**
 * Leakage score against `n` true caches given as row/col pairs.
 *
 * # Safety
 * `belief` must be a live handle; `rows` and `cols` must point to `n` values.
 */
int32_t scrat_observer_leakage(const struct ScratObserver *belief,
                               const uint32_t *rows,
                               const uint32_t *cols,
                               size_t n,
                               double *out);

/**
 * # Safety
 * `belief` must be null or a handle from `scrat_observer_uniform`.
 */
void scrat_observer_free(struct ScratObserver *belief);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCRAT_H */
