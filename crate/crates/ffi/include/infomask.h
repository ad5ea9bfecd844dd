#ifndef INFOMASK_H
#define INFOMASK_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum ImStatus {
  IM_STATUS_OK = 0,
  IM_STATUS_NULL_POINTER = 1,
  IM_STATUS_INVALID_ARGUMENT = 2,
  IM_STATUS_DIMENSION = 3,
  IM_STATUS_CONFIG = 4,
  IM_STATUS_CONTRACT = 5,
  IM_STATUS_NON_FINITE = 6,
  IM_STATUS_CHECKPOINT = 7,
  IM_STATUS_IO = 8,
  IM_STATUS_BUFFER_TOO_SMALL = 9,
  IM_STATUS_PANIC = 10,
} ImStatus;

/**
 * A synthetic corpus held in memory.
 */
typedef struct ImDataset ImDataset;

/**
 * Trained or freshly initialized model parameters.
 */
typedef struct ImModel ImModel;

/**
 * A training run in progress.
 */
typedef struct ImTrainer ImTrainer;

/**
 * Retrieval summary of one direction.
 */
typedef struct ImRetrieval {
  double r1;
  double r5;
  double r10;
  double mdr;
  double mnr;
  double rsum;
} ImRetrieval;

/**
 * Loss breakdown of one training step.
 */
typedef struct ImLosses {
  uint64_t step;
  double vtc;
  double vtc_h;
  double vvc_h;
  double vtc_l;
  double vvc_l;
  double adv;
  double total;
  double attn_top30;
  double attn_bot30;
} ImLosses;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `cap`). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t im_last_error(char *buf, size_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *im_version(void);

/**
 * Fresh model from a JSON training config (null for defaults).
 *
 * # Safety
 * `config_json` must be null or a NUL-terminated string; `out` must be valid.
 */
enum ImStatus im_model_new(const char *config_json, uint64_t seed, struct ImModel **out);

/**
 * Model parameters from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid.
 */
enum ImStatus im_model_load(const char *path, struct ImModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library, freed at most once.
 */
void im_model_free(struct ImModel *model);

/**
 * Renders a synthetic corpus with the geometry of `config_json`.
 *
 * # Safety
 * `config_json` must be null or a NUL-terminated string; `out` must be valid.
 */
enum ImStatus im_dataset_generate(size_t count,
                                  uint64_t seed,
                                  const char *config_json,
                                  struct ImDataset **out);

/**
 * # Safety
 * `dataset` must be a valid handle or null.
 */
size_t im_dataset_len(const struct ImDataset *dataset);

/**
 * # Safety
 * `dataset` must be null or a handle from this library, freed at most once.
 */
void im_dataset_free(struct ImDataset *dataset);

/**
 * Text-to-video scores of the whole corpus, row-major `[n, n]`.
 *
 * # Safety
 * Handles must be valid; `out` must hold `cap` doubles.
 */
enum ImStatus im_similarity(const struct ImModel *model,
                            const struct ImDataset *dataset,
                            double *out,
                            size_t cap);

/**
 * Retrieval metrics with rows as queries and the diagonal as ground truth.
 *
 * # Safety
 * `s` must hold `b * b` doubles; `out` must be valid.
 */
enum ImStatus im_rank_metrics(const double *s, size_t b, struct ImRetrieval *out);

/**
 * DSL reweighting; `tau <= 0` picks 1% of the score scale.
 *
 * # Safety
 * `s` and `out` must each hold `b * b` doubles.
 */
enum ImStatus im_dsl_adjust(const double *s, size_t b, double tau, double *out);

/**
 * Informed tube mask from one clip's attention `[m, heads, t, t]`.
 * Writes the masked patch indices to `out` and their count to `out_len`.
 *
 * # Safety
 * `attn` must hold `m * heads * t * t` doubles; `out` must hold `cap`
 * entries; `out_len` must be valid.
 */
enum ImStatus im_informed_mask(const double *attn,
                               size_t m,
                               size_t heads,
                               size_t t,
                               size_t a_s,
                               size_t a_e,
                               double ratio,
                               bool high,
                               size_t *out,
                               size_t cap,
                               size_t *out_len);

/**
 * New training run from a JSON config (null for defaults).
 *
 * # Safety
 * `config_json` must be null or a NUL-terminated string; `out` must be valid.
 */
enum ImStatus im_trainer_new(const char *config_json, struct ImTrainer **out);

/**
 * Resumes a run from a checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid.
 */
enum ImStatus im_trainer_load(const char *path, struct ImTrainer **out);

/**
 * One co-learning step on the batch scheduled for the current step.
 *
 * # Safety
 * Handles must be valid; `out` must be null or valid.
 */
enum ImStatus im_trainer_step(struct ImTrainer *trainer,
                              const struct ImDataset *dataset,
                              struct ImLosses *out);

/**
 * Completed steps of a run, or 0 for a null handle.
 *
 * # Safety
 * `trainer` must be a valid handle or null.
 */
uint64_t im_trainer_steps_done(const struct ImTrainer *trainer);

/**
 * Writes a checkpoint of the run.
 *
 * # Safety
 * `trainer` must be valid; `path` must be a NUL-terminated string.
 */
enum ImStatus im_trainer_save(const struct ImTrainer *trainer, const char *path);

/**
 * Snapshot of the run's current parameters as a separate model handle.
 *
 * # Safety
 * `trainer` must be valid; `out` must be valid.
 */
enum ImStatus im_trainer_model(const struct ImTrainer *trainer, struct ImModel **out);

/**
 * # Safety
 * `trainer` must be null or a handle from this library, freed at most once.
 */
void im_trainer_free(struct ImTrainer *trainer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INFOMASK_H */
