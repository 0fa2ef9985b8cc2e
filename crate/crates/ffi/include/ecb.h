#ifndef ECB_H
#define ECB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum EcbStatus {
  ECB_STATUS_OK = 0,
  /**
   * A null pointer, bad UTF-8 or an out-of-range enum value.
   */
  ECB_STATUS_INVALID_ARGUMENT = 1,
  ECB_STATUS_CONFIG = 2,
  ECB_STATUS_DATA = 3,
  ECB_STATUS_DIMENSION = 4,
  /**
   * A non-finite loss or parameter; the training run cannot continue.
   */
  ECB_STATUS_NUMERIC = 5,
  ECB_STATUS_IO = 6,
  ECB_STATUS_FORMAT = 7,
  ECB_STATUS_INTERNAL = 8,
  ECB_STATUS_PANIC = 9,
} EcbStatus;

/**
 * Which branch to evaluate. The CNN branch is the deployed model.
 */
typedef enum EcbBranch {
  ECB_BRANCH_CNN = 0,
  ECB_BRANCH_VIT = 1,
} EcbBranch;

typedef struct EcbConfigHandle EcbConfigHandle;

typedef struct EcbDatasetHandle EcbDatasetHandle;

typedef struct EcbModelHandle EcbModelHandle;

/**
 * A training run in progress. It owns a copy of the dataset, so the dataset
 * handle it was created from may be freed at any time.
 */
typedef struct EcbSessionHandle EcbSessionHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ecb_version(void);

/**
 * Message for the most recent failed call on this thread, or null if the
 * last call succeeded. Valid until the next `ecb_*` call on this thread.
 */
const char *ecb_last_error(void);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void ecb_string_free(char *s);

/**
 * Default training configuration.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum EcbStatus ecb_config_new_default(struct EcbConfigHandle **out);

/**
 * Parse a `key = value` configuration text on top of the defaults.
 *
 * # Safety
 * `config_text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EcbStatus ecb_config_from_text(const char *config_text, struct EcbConfigHandle **out);

/**
 * Set one key. The configuration is left unchanged on failure.
 *
 * # Safety
 * `config` must be a live handle; `key` and `value` NUL-terminated strings.
 */
enum EcbStatus ecb_config_set(struct EcbConfigHandle *config, const char *key, const char *value);

/**
 * Render the configuration as text; release with [`ecb_string_free`].
 *
 * # Safety
 * `config` must be a live handle and `out` a valid pointer.
 */
enum EcbStatus ecb_config_to_text(const struct EcbConfigHandle *config, char **out);

/**
 * # Safety
 * `config` must be null or a live handle.
 */
void ecb_config_free(struct EcbConfigHandle *config);

/**
 * Generate a source/target pair and split `k_shot` labeled target samples
 * per class off the target. `shift_preset` is `"default"` or `"identity"`.
 *
 * # Safety
 * `shift_preset` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EcbStatus ecb_dataset_generate(uint64_t seed,
                                    size_t classes,
                                    size_t n_source,
                                    size_t n_target,
                                    const char *shift_preset,
                                    size_t k_shot,
                                    struct EcbDatasetHandle **out);

/**
 * Load a dataset file written by `ecb gen-data` and split it as
 * [`ecb_dataset_generate`] does.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EcbStatus ecb_dataset_load(const char *path, size_t k_shot, struct EcbDatasetHandle **out);

/**
 * Sizes of the source, labeled target and unlabeled target splits. Any
 * output pointer may be null.
 *
 * # Safety
 * `dataset` must be a live handle.
 */
enum EcbStatus ecb_dataset_sizes(const struct EcbDatasetHandle *dataset,
                                 size_t *source,
                                 size_t *target_labeled,
                                 size_t *target_unlabeled);

/**
 * # Safety
 * `dataset` must be null or a live handle.
 */
void ecb_dataset_free(struct EcbDatasetHandle *dataset);

/**
 * Start a training run. The session copies both arguments.
 *
 * # Safety
 * `config` and `dataset` must be live handles and `out` a valid pointer.
 */
enum EcbStatus ecb_session_new(const struct EcbConfigHandle *config,
                               const struct EcbDatasetHandle *dataset,
                               struct EcbSessionHandle **out);

/**
 * Run up to `iterations` training iterations, stopping early once the
 * configured total is reached. `done` (may be null) receives how many ran.
 * After a `ECB_STATUS_NUMERIC` failure the session should be freed.
 *
 * # Safety
 * `session` must be a live handle.
 */
enum EcbStatus ecb_session_step(struct EcbSessionHandle *session, size_t iterations, size_t *done);

/**
 * Iterations completed so far and whether the run is finished. Either
 * output pointer may be null.
 *
 * # Safety
 * `session` must be a live handle.
 */
enum EcbStatus ecb_session_progress(const struct EcbSessionHandle *session,
                                    size_t *iteration,
                                    bool *finished);

/**
 * Accuracy in percent of one branch on the session's unlabeled target split.
 * `branch` takes an [`EcbBranch`] value.
 *
 * # Safety
 * `session` must be a live handle and `out` a valid pointer.
 */
enum EcbStatus ecb_session_target_accuracy(const struct EcbSessionHandle *session,
                                           int32_t branch,
                                           double *out);

/**
 * Write the current parameters and config as a checkpoint file readable by
 * `ecb eval` and [`ecb_model_load`].
 *
 * # Safety
 * `session` must be a live handle and `path` a NUL-terminated string.
 */
enum EcbStatus ecb_session_save_checkpoint(const struct EcbSessionHandle *session,
                                           const char *path);

/**
 * # Safety
 * `session` must be null or a live handle.
 */
void ecb_session_free(struct EcbSessionHandle *session);

/**
 * Load a checkpoint for inference.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EcbStatus ecb_model_load(const char *path, struct EcbModelHandle **out);

/**
 * Input geometry: channels, image side and class count. Any output pointer
 * may be null.
 *
 * # Safety
 * `model` must be a live handle.
 */
enum EcbStatus ecb_model_geometry(const struct EcbModelHandle *model,
                                  size_t *channels,
                                  size_t *side,
                                  size_t *classes);

/**
 * Predict a class for each of `n` images with the CNN branch. `images`
 * holds `n * channels * side * side` values in row-major `[n, c, h, w]`
 * order; `labels` receives `n` class indices.
 *
 * # Safety
 * `images` must point to that many doubles and `labels` to `n` writable
 * `size_t`s.
 */
enum EcbStatus ecb_model_predict(const struct EcbModelHandle *model,
                                 const double *images,
                                 size_t n,
                                 size_t *labels);

/**
 * Accuracy in percent of one branch on a dataset's unlabeled target split.
 *
 * # Safety
 * `model` and `dataset` must be live handles and `out` a valid pointer.
 */
enum EcbStatus ecb_model_target_accuracy(const struct EcbModelHandle *model,
                                         const struct EcbDatasetHandle *dataset,
                                         int32_t branch,
                                         double *out);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
void ecb_model_free(struct EcbModelHandle *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ECB_H */
