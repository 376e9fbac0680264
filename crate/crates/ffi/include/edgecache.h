#ifndef EDGECACHE_H
#define EDGECACHE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EcStatus {
  EC_STATUS_OK = 0,
  EC_STATUS_NULL_POINTER = 1,
  EC_STATUS_INVALID_ARGUMENT = 2,
  EC_STATUS_BUFFER_TOO_SMALL = 3,
  EC_STATUS_CONFIG = 4,
  EC_STATUS_DOMAIN = 5,
  EC_STATUS_CONTRACT = 6,
  EC_STATUS_DIVERGENCE = 7,
  EC_STATUS_IO = 8,
  EC_STATUS_FORMAT = 9,
  /**
   * The request budget is spent; no decision is pending.
   */
  EC_STATUS_EXHAUSTED = 10,
  EC_STATUS_PANIC = 11,
  EC_STATUS_INTERNAL = 12,
} EcStatus;

typedef struct EcEnv EcEnv;

typedef struct EcTwin EcTwin;

typedef struct EcWorkload EcWorkload;

typedef struct EcRequest {
  uint64_t time;
  uint64_t client;
  uint32_t content;
  /**
   * 0 read, 1 write.
   */
  uint8_t op;
} EcRequest;

/**
 * A pending decision.
 */
typedef struct EcObservation {
  struct EcRequest request;
  uint64_t serving_bs;
  /**
   * -1 when the content is not cached on the serving BS.
   */
  int64_t last_cached;
  uint64_t frequency;
} EcObservation;

typedef struct EcStepResult {
  double reward;
  double penalty;
  uint64_t hits;
  /**
   * The action changed a cache slot.
   */
  bool accepted;
  /**
   * No further decision in this episode.
   */
  bool done;
} EcStepResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, NUL-terminated and static.
 */
const char *ec_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into the library on the same thread.
 */
const char *ec_last_error_message(void);

/**
 * Zipf request stream over `catalogue` contents.
 *
 * # Safety
 * `out` must be writable.
 */
enum EcStatus ec_workload_new_zipf(double shape,
                                   size_t catalogue,
                                   uint64_t model_seed,
                                   uint64_t stream_seed,
                                   size_t n_clients,
                                   struct EcWorkload **out);

/**
 * Request stream with content `i` drawn proportionally to `weights[i]`.
 *
 * # Safety
 * `weights` must hold `n` readable doubles; `out` must be writable.
 */
enum EcStatus ec_workload_new_weighted(const double *weights,
                                       size_t n,
                                       uint64_t stream_seed,
                                       size_t n_clients,
                                       struct EcWorkload **out);

/**
 * Next request of the stream.
 *
 * # Safety
 * `h` must come from an `ec_workload_new_*` call; `out` must be writable.
 */
enum EcStatus ec_workload_next(struct EcWorkload *h, struct EcRequest *out);

/**
 * Catalogue size of the stream's workload.
 *
 * # Safety
 * `h` must come from an `ec_workload_new_*` call.
 */
size_t ec_workload_catalogue(const struct EcWorkload *h);

/**
 * Per-content request probabilities; `len` must be at least the catalogue
 * size.
 *
 * # Safety
 * `h` must be a live workload; `buf` must hold `len` writable doubles.
 */
enum EcStatus ec_workload_pmf(struct EcWorkload *h, double *buf, size_t len);

/**
 * # Safety
 * `h` must come from an `ec_workload_new_*` call or be NULL.
 */
void ec_workload_free(struct EcWorkload *h);

/**
 * Main-run environment for `seed` under a TOML experiment config (NULL for
 * the defaults). Drive it with `ec_env_advance` / `ec_env_step`.
 *
 * # Safety
 * `config_toml` must be NULL or NUL-terminated; `out` must be writable.
 */
enum EcStatus ec_env_new(const char *config_toml, uint64_t seed, struct EcEnv **out);

/**
 * Size of the action space, skip included.
 *
 * # Safety
 * `h` must be a live environment or NULL.
 */
size_t ec_env_n_actions(const struct EcEnv *h);

/**
 * Length of the encoded state, base or extended.
 *
 * # Safety
 * `h` must be a live environment or NULL.
 */
size_t ec_env_state_dim(const struct EcEnv *h, bool extended);

/**
 * Number of BSs.
 *
 * # Safety
 * `h` must be a live environment or NULL.
 */
size_t ec_env_n_bs(const struct EcEnv *h);

/**
 * Serves requests up to the next decision and describes it. Returns
 * `EC_STATUS_EXHAUSTED` when the budget is spent.
 *
 * # Safety
 * `h` must be a live environment; `out` must be writable.
 */
enum EcStatus ec_env_advance(struct EcEnv *h, struct EcObservation *out);

/**
 * Feature vector of the pending decision.
 *
 * # Safety
 * `h` must be a live environment; `buf` must hold `len` writable doubles.
 */
enum EcStatus ec_env_encode(struct EcEnv *h, bool extended, double *buf, size_t len);

/**
 * 1 for each action that can take effect at the pending decision: skip and
 * the slots of BSs covering the requesting client.
 *
 * # Safety
 * `h` must be a live environment; `mask` must hold `len` writable bytes.
 */
enum EcStatus ec_env_allowed_actions(struct EcEnv *h, uint8_t *mask, size_t len);

/**
 * Normalized per-BS loads.
 *
 * # Safety
 * `h` must be a live environment; `buf` must hold `len` writable doubles.
 */
enum EcStatus ec_env_loads(struct EcEnv *h, double *buf, size_t len);

/**
 * Applies `action` to the pending decision and runs to the next one.
 *
 * # Safety
 * `h` must be a live environment; `out` must be writable.
 */
enum EcStatus ec_env_step(struct EcEnv *h, size_t action, struct EcStepResult *out);

/**
 * Hits and requests served so far.
 *
 * # Safety
 * `h` must be a live environment; `hits` and `requests` must be writable.
 */
enum EcStatus ec_env_counters(struct EcEnv *h, uint64_t *hits, uint64_t *requests);

/**
 * Writes a resumable JSON snapshot of the environment.
 *
 * # Safety
 * `h` must be a live environment; `path` NUL-terminated.
 */
enum EcStatus ec_env_save(struct EcEnv *h, const char *path);

/**
 * Replaces the environment's state with a snapshot written by
 * `ec_env_save` under the same config.
 *
 * # Safety
 * `h` must be a live environment; `path` NUL-terminated.
 */
enum EcStatus ec_env_restore(struct EcEnv *h, const char *path);

/**
 * # Safety
 * `h` must come from `ec_env_new` or be NULL.
 */
void ec_env_free(struct EcEnv *h);

/**
 * Global twin bootstrapped from the history of `seed`.
 *
 * # Safety
 * `config_toml` must be NULL or NUL-terminated; `out` must be writable.
 */
enum EcStatus ec_twin_train(const char *config_toml, uint64_t seed, struct EcTwin **out);

/**
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum EcStatus ec_twin_load(const char *path, struct EcTwin **out);

/**
 * # Safety
 * `h` must be a live twin; `path` NUL-terminated.
 */
enum EcStatus ec_twin_save(struct EcTwin *h, const char *path, uint64_t creation_step);

/**
 * Catalogue size the twin models.
 *
 * # Safety
 * `h` must be a live twin or NULL.
 */
size_t ec_twin_catalogue(const struct EcTwin *h);

/**
 * The twin's forecast request distribution.
 *
 * # Safety
 * `h` must be a live twin; `buf` must hold `len` writable doubles.
 */
enum EcStatus ec_twin_pmf(struct EcTwin *h, double *buf, size_t len);

/**
 * # Safety
 * `h` must come from `ec_twin_train` / `ec_twin_load` or be NULL.
 */
void ec_twin_free(struct EcTwin *h);

/**
 * Runs every seed of the config, writing outputs to `out_dir` when it is
 * not NULL, and reports the seed-mean final hit rate.
 *
 * # Safety
 * String arguments must be NULL or NUL-terminated; `final_hit_rate` must be
 * writable.
 */
enum EcStatus ec_run_experiment(const char *config_toml,
                                const char *out_dir,
                                double *final_hit_rate);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EDGECACHE_H */
