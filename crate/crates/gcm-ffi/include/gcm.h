/* C interface for the gcm steering laboratory. Generated by cbindgen; do not edit. */

#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum GcmStatus {
  GCM_STATUS_OK = 0,
  GCM_STATUS_NULL_POINTER = 1,
  GCM_STATUS_INVALID_ARGUMENT = 2,
  GCM_STATUS_UTF8 = 3,
  GCM_STATUS_IO = 4,
  GCM_STATUS_PARSE = 5,
  GCM_STATUS_VALIDATION = 6,
  GCM_STATUS_TRAINING = 7,
  GCM_STATUS_DEGENERATE = 8,
  GCM_STATUS_BUFFER_TOO_SMALL = 9,
  GCM_STATUS_INTERNAL = 10,
} GcmStatus;

/**
 * Opaque contrastive-dataset handle.
 */
typedef struct GcmDataset GcmDataset;

/**
 * Opaque trained-model handle.
 */
typedef struct GcmModel GcmModel;

/**
 * Opaque steering-plan handle.
 */
typedef struct GcmPlan GcmPlan;

/**
 * Model shape, mirrored as plain integers for bindings.
 */
typedef struct GcmModelConfig {
  uint32_t n_layers;
  uint32_t n_heads;
  uint32_t d_model;
  uint32_t d_head;
  uint32_t d_mlp;
  uint32_t vocab_size;
  uint32_t max_seq_len;
} GcmModelConfig;

/**
 * Judge outcome with one flag per axis; `success` is their conjunction.
 */
typedef struct GcmVerdict {
  bool concept;
  bool relevance;
  bool fluency;
  bool success;
} GcmVerdict;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread; empty string when no error occurred.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *gcm_last_error(void);

/**
 * Library version as a static C string.
 */
const char *gcm_version(void);

/**
 * Load a checkpoint from `path` into a new model handle.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum GcmStatus gcm_model_load(const char *path, struct GcmModel **out);

/**
 * # Safety
 * `model` must come from `gcm_model_load` and not be freed twice.
 */
void gcm_model_free(struct GcmModel *model);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum GcmStatus gcm_model_config(const struct GcmModel *model, struct GcmModelConfig *out);

/**
 * Greedy decoding from `prompt`. `stop_token < 0` disables the stop check.
 * On success `out_len` holds the number of generated tokens; if it exceeds
 * `out_cap`, `BufferTooSmall` is returned with `out_len` set to the
 * required capacity.
 *
 * # Safety
 * Pointers must be valid; `prompt_len`/`out_cap` must describe real buffers.
 */
enum GcmStatus gcm_greedy_generate(const struct GcmModel *model,
                                   const uint32_t *prompt,
                                   size_t prompt_len,
                                   size_t max_new,
                                   int64_t stop_token,
                                   uint32_t *out,
                                   size_t out_cap,
                                   size_t *out_len);

/**
 * Teacher-forced log-probability of `response` given `prompt`.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum GcmStatus gcm_logprob_response(const struct GcmModel *model,
                                    const uint32_t *prompt,
                                    size_t prompt_len,
                                    const uint32_t *response,
                                    size_t response_len,
                                    double *out);

/**
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum GcmStatus gcm_dataset_load(const char *path, struct GcmDataset **out);

/**
 * # Safety
 * `dataset` must come from `gcm_dataset_load` and not be freed twice.
 */
void gcm_dataset_free(struct GcmDataset *dataset);

/**
 * Number of contrastive pairs; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be a valid handle or null.
 */
size_t gcm_dataset_len(const struct GcmDataset *dataset);

/**
 * Rank attention heads and write the score table CSV to `out_path`.
 * `method` is one of "act_patch", "attrib_patch", "knockout", "iti_probe",
 * "random".
 *
 * # Safety
 * All pointers must be valid NUL-terminated strings / live handles.
 */
enum GcmStatus gcm_localize_to_csv(const struct GcmModel *model,
                                   const struct GcmDataset *dataset,
                                   const char *method,
                                   uint64_t seed,
                                   const char *out_path);

/**
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum GcmStatus gcm_plan_load(const char *path, struct GcmPlan **out);

/**
 * # Safety
 * `plan` must come from `gcm_plan_load` and not be freed twice.
 */
void gcm_plan_free(struct GcmPlan *plan);

/**
 * Greedy decoding under a steering plan; same buffer contract as
 * `gcm_greedy_generate`.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum GcmStatus gcm_apply_plan(const struct GcmModel *model,
                              const struct GcmPlan *plan,
                              const uint32_t *prompt,
                              size_t prompt_len,
                              size_t max_new,
                              int64_t stop_token,
                              uint32_t *out,
                              size_t out_cap,
                              size_t *out_len);

/**
 * Judge a steered response against its prompt; the baseline is recorded in
 * downstream reports but does not change the verdict.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum GcmStatus gcm_judge_response(const uint32_t *prompt,
                                  size_t prompt_len,
                                  const uint32_t *steered,
                                  size_t steered_len,
                                  const uint32_t *baseline,
                                  size_t baseline_len,
                                  struct GcmVerdict *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
