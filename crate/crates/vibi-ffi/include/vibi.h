#ifndef VIBI_H
#define VIBI_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Which fidelity variant to evaluate.
 */
typedef enum VibiFidelityVariant {
  VIBI_FIDELITY_VARIANT_APPROXIMATOR = 0,
  VIBI_FIDELITY_VARIANT_RATIONALE = 1,
} VibiFidelityVariant;

/**
 * Which split of a generated task to expose as a dataset.
 */
typedef enum VibiSplit {
  VIBI_SPLIT_TRAIN = 0,
  VIBI_SPLIT_VAL = 1,
  VIBI_SPLIT_TEST = 2,
} VibiSplit;

/**
 * Status code of every fallible call.
 */
typedef enum VibiStatus {
  VIBI_STATUS_OK = 0,
  VIBI_STATUS_NULL_POINTER = 1,
  VIBI_STATUS_UTF8 = 2,
  VIBI_STATUS_INVALID_ARGUMENT = 3,
  VIBI_STATUS_DATA = 4,
  VIBI_STATUS_NUMERIC = 5,
  VIBI_STATUS_IO = 6,
  VIBI_STATUS_PANIC = 7,
} VibiStatus;

/**
 * A black box under explanation (opaque).
 */
typedef struct VibiBlackBox VibiBlackBox;

/**
 * A loaded explainer/approximator checkpoint (opaque).
 */
typedef struct VibiCheckpoint VibiCheckpoint;

/**
 * A row-oriented dataset (opaque).
 */
typedef struct VibiDataset VibiDataset;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; never freed.
 */
const char *vibi_version(void);

/**
 * Message of the last failure on this thread. Valid until the next
 * failing call on the same thread; never freed by the caller.
 */
const char *vibi_last_error_message(void);

/**
 * Release a string returned through an out-parameter.
 *
 * # Safety
 * `s` must have been produced by this library and not freed before.
 */
void vibi_string_free(char *s);

/**
 * Release a byte buffer returned through an out-parameter.
 *
 * # Safety
 * `ptr`/`len` must come from this library and not be freed before.
 */
void vibi_bytes_free(uint8_t *ptr, size_t len);

/**
 * Load a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `out` a valid pointer.
 */
enum VibiStatus vibi_checkpoint_load(const char *path, struct VibiCheckpoint **out);

/**
 * Save a checkpoint to a file (byte-exact round-trip).
 *
 * # Safety
 * `ck` must be a live handle from this library; `path` NUL-terminated.
 */
enum VibiStatus vibi_checkpoint_save(const struct VibiCheckpoint *ck, const char *path);

/**
 * The checkpoint's configuration as a JSON string (caller frees).
 *
 * # Safety
 * `ck` must be a live handle; `out` a valid pointer.
 */
enum VibiStatus vibi_checkpoint_config_json(const struct VibiCheckpoint *ck, char **out);

/**
 * # Safety
 * `ck` must be a handle from this library, freed at most once.
 */
void vibi_checkpoint_free(struct VibiCheckpoint *ck);

/**
 * Load a paired IDX image/label dataset.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` a valid pointer.
 */
enum VibiStatus vibi_dataset_load_idx(const char *images_path,
                                      const char *labels_path,
                                      struct VibiDataset **out);

/**
 * Generate one split of the deterministic synthetic planted-chunk task.
 *
 * # Safety
 * `relevant` must point to `relevant_len` readable u32 values; `out` must
 * be a valid pointer.
 */
enum VibiStatus vibi_dataset_gen_synth(uint32_t d,
                                       uint32_t features_per_chunk,
                                       const uint32_t *relevant,
                                       size_t relevant_len,
                                       uint64_t n,
                                       uint64_t seed,
                                       enum VibiSplit split,
                                       struct VibiDataset **out);

/**
 * Number of instances; 0 for a null handle.
 *
 * # Safety
 * `ds` must be a live handle or null.
 */
uint64_t vibi_dataset_len(const struct VibiDataset *ds);

/**
 * Features per instance; 0 for a null handle.
 *
 * # Safety
 * `ds` must be a live handle or null.
 */
uint64_t vibi_dataset_features(const struct VibiDataset *ds);

/**
 * # Safety
 * `ds` must be a handle from this library, freed at most once.
 */
void vibi_dataset_free(struct VibiDataset *ds);

/**
 * Load a model-backed black box from a `VIBB` artifact file.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` valid.
 */
enum VibiStatus vibi_blackbox_load(const char *path, struct VibiBlackBox **out);

/**
 * Construct the planted-rule black box of the synthetic task.
 *
 * # Safety
 * `relevant` must point to `relevant_len` readable u32 values; `out`
 * valid.
 */
enum VibiStatus vibi_blackbox_rule(uint32_t d,
                                   uint32_t features_per_chunk,
                                   const uint32_t *relevant,
                                   size_t relevant_len,
                                   struct VibiBlackBox **out);

/**
 * # Safety
 * `bb` must be a handle from this library, freed at most once.
 */
void vibi_blackbox_free(struct VibiBlackBox *bb);

/**
 * Evaluate fidelity of a checkpoint against a black box over a dataset,
 * returning the report as JSON (caller frees). `n_samples = 0` uses the
 * checkpoint's configured evaluation sample count.
 *
 * # Safety
 * All handles must be live; `out_json` valid.
 */
enum VibiStatus vibi_eval_fidelity_json(const struct VibiCheckpoint *ck,
                                        const struct VibiBlackBox *bb,
                                        const struct VibiDataset *ds,
                                        enum VibiFidelityVariant variant,
                                        uint32_t n_samples,
                                        uint64_t seed,
                                        char **out_json);

/**
 * Export the explanation record of one instance as JSON (caller frees).
 *
 * # Safety
 * All handles must be live; `out_json` valid.
 */
enum VibiStatus vibi_explain_json(const struct VibiCheckpoint *ck,
                                  const struct VibiBlackBox *bb,
                                  const struct VibiDataset *ds,
                                  uint64_t instance,
                                  char **out_json);

/**
 * Render the PGM heatmap of one instance (grid chunkings only); the byte
 * buffer is released with `vibi_bytes_free`.
 *
 * # Safety
 * All handles must be live; `out_bytes` and `out_len` valid.
 */
enum VibiStatus vibi_explain_heatmap_pgm(const struct VibiCheckpoint *ck,
                                         const struct VibiBlackBox *bb,
                                         const struct VibiDataset *ds,
                                         uint64_t instance,
                                         uint8_t **out_bytes,
                                         size_t *out_len);

/**
 * Run a full training described by a TOML run-configuration file, writing
 * the checkpoint and resolved configuration into the configured output
 * directory, and return the checkpoint handle.
 *
 * # Safety
 * `config_path` must be NUL-terminated; `out` valid.
 */
enum VibiStatus vibi_train_from_config(const char *config_path, struct VibiCheckpoint **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIBI_H */
