#ifndef UGFED_H
#define UGFED_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum UgfedStatus {
  UGFED_STATUS_OK = 0,
  // Invalid configuration or arguments.
  UGFED_STATUS_INVALID_CONFIG = 1,
  // A non-finite value appeared during training.
  UGFED_STATUS_NUMERIC = 2,
  UGFED_STATUS_IO = 3,
  UGFED_STATUS_NULL_POINTER = 4,
  // Text argument is not valid UTF-8.
  UGFED_STATUS_INVALID_UTF8 = 5,
  // A Rust panic was caught at the boundary.
  UGFED_STATUS_PANIC = 6,
} UgfedStatus;

// Which held-out interactions to score.
typedef enum UgfedSplit {
  UGFED_SPLIT_VALIDATION = 0,
  UGFED_SPLIT_TEST = 1,
} UgfedSplit;

// Opaque run configuration.
typedef struct UgfedConfig UgfedConfig;

// Opaque simulation: dataset split plus federation state.
typedef struct UgfedSimulation UgfedSimulation;

// Macro-averaged ranking metrics.
typedef struct UgfedMetrics {
  uintptr_t k;
  // Users with at least one held-out item.
  uintptr_t users;
  double recall;
  double ndcg;
} UgfedMetrics;

// Summary of one federated round.
typedef struct UgfedRoundStats {
  uintptr_t round;
  uintptr_t participants;
  double mean_bpr;
  double mean_cl;
  double server_loss;
  double total_loss;
} UgfedRoundStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if none. The
// pointer stays valid until the next failing call on the same thread.
const char *ugfed_last_error(void);

// Library version as a static NUL-terminated string.
const char *ugfed_version(void);

// Creates a configuration holding every default.
//
// # Safety
// `out` must be null or valid for writing one pointer.
enum UgfedStatus ugfed_config_new(struct UgfedConfig **out);

// Reads a configuration file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writing
// one pointer.
enum UgfedStatus ugfed_config_from_file(const char *path, struct UgfedConfig **out);

// Applies one `key=value` override, then validates the whole config.
//
// # Safety
// `cfg` must come from a `ugfed_config_*` constructor; `assignment` must be a
// NUL-terminated string.
enum UgfedStatus ugfed_config_set(struct UgfedConfig *cfg, const char *assignment);

// Writes the resolved config, every default included.
//
// # Safety
// `cfg` must be a live handle; `path` a NUL-terminated string.
enum UgfedStatus ugfed_config_save(const struct UgfedConfig *cfg, const char *path);

// # Safety
// `cfg` must be null or a handle not yet freed.
void ugfed_config_free(struct UgfedConfig *cfg);

// Trains to completion and writes all run artifacts into `out_dir`.
// `best` receives the test metrics at the best validation round.
//
// # Safety
// `cfg` must be a live handle, `out_dir` a NUL-terminated string, and `best`
// null or valid for writing.
enum UgfedStatus ugfed_train(const struct UgfedConfig *cfg,
                             const char *out_dir,
                             struct UgfedMetrics *best);

// Prepares the data, share policy and mended server graph for stepwise
// training. The config is copied; the handle may be freed afterwards.
//
// # Safety
// `cfg` must be a live handle; `out` valid for writing one pointer.
enum UgfedStatus ugfed_simulation_new(const struct UgfedConfig *cfg, struct UgfedSimulation **out);

// Runs one federated round.
//
// # Safety
// `sim` must be a live handle; `stats` null or valid for writing.
enum UgfedStatus ugfed_simulation_run_round(struct UgfedSimulation *sim,
                                            struct UgfedRoundStats *stats);

// Scores the current model on the validation or test interactions.
//
// # Safety
// `sim` must be a live handle; `out` valid for writing.
enum UgfedStatus ugfed_simulation_evaluate(const struct UgfedSimulation *sim,
                                           enum UgfedSplit split,
                                           struct UgfedMetrics *out);

// Rounds completed so far; 0 for a null handle.
//
// # Safety
// `sim` must be null or a live handle.
uintptr_t ugfed_simulation_round(const struct UgfedSimulation *sim);

// Number of users and items after filtering.
//
// # Safety
// `sim` must be a live handle; `users` and `items` null or valid for writing.
enum UgfedStatus ugfed_simulation_shape(const struct UgfedSimulation *sim,
                                        uintptr_t *users,
                                        uintptr_t *items);

// # Safety
// `sim` must be null or a handle not yet freed.
void ugfed_simulation_free(struct UgfedSimulation *sim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UGFED_H */
