#ifndef CAFM_H
#define CAFM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum CafmStatus {
  CAFM_STATUS_OK = 0,
  CAFM_STATUS_NULL_POINTER = 1,
  CAFM_STATUS_INVALID_ARGUMENT = 2,
  CAFM_STATUS_CONFIG = 3,
  CAFM_STATUS_SHAPE = 4,
  CAFM_STATUS_NON_FINITE = 5,
  CAFM_STATUS_CHECKPOINT = 6,
  CAFM_STATUS_ORACLE = 7,
  CAFM_STATUS_IO = 8,
  CAFM_STATUS_INTERNAL = 9,
} CafmStatus;

/**
 * Experiment configuration handle.
 */
typedef struct CafmConfig CafmConfig;

/**
 * Trained model handle.
 */
typedef struct CafmModel CafmModel;

/**
 * Evaluation summary. `dist_mean` is meaningful only when `has_distance`.
 */
typedef struct CafmMetrics {
  double swd_mean;
  double swd_std;
  double viol_mean;
  double viol_std;
  double dist_mean;
  bool has_distance;
  size_t trials;
} CafmMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a
 * successful call. Valid until the next call on the same thread.
 */
const char *cafm_last_error_message(void);

/**
 * Parses a TOML config.
 */
enum CafmStatus cafm_config_parse(const char *text, struct CafmConfig **out);

/**
 * Loads a TOML config file.
 */
enum CafmStatus cafm_config_load(const char *path, struct CafmConfig **out);

void cafm_config_free(struct CafmConfig *cfg);

enum CafmStatus cafm_config_set_seed(struct CafmConfig *cfg, uint64_t seed);

/**
 * Dimension of the configured task.
 */
enum CafmStatus cafm_config_dim(const struct CafmConfig *cfg, size_t *out);

/**
 * The resolved config as TOML. Release with [`cafm_string_free`].
 */
enum CafmStatus cafm_config_to_string(const struct CafmConfig *cfg, char **out);

void cafm_string_free(char *s);

/**
 * Trains the configured method.
 */
enum CafmStatus cafm_train(const struct CafmConfig *cfg, struct CafmModel **out);

/**
 * Loads checkpoints: one path for `fm` / `fm_dd`, two (theta1, theta2)
 * for `fm_re`.
 */
enum CafmStatus cafm_model_load(const struct CafmConfig *cfg,
                                const char *const *paths,
                                size_t n_paths,
                                struct CafmModel **out);

/**
 * Writes the model's checkpoint file(s) into `dir`.
 */
enum CafmStatus cafm_model_save(const struct CafmModel *model, const char *dir);

void cafm_model_free(struct CafmModel *model);

/**
 * Mean-flow samples from the initial points `x0` (`rows x dim`) into
 * `out` (same size).
 */
enum CafmStatus cafm_model_sample(const struct CafmModel *model,
                                  const struct CafmConfig *cfg,
                                  const double *x0,
                                  size_t rows,
                                  size_t dim,
                                  double *out);

/**
 * Runs the configured evaluation on `model`.
 */
enum CafmStatus cafm_evaluate(const struct CafmConfig *cfg,
                              const struct CafmModel *model,
                              size_t workers,
                              struct CafmMetrics *out);

/**
 * Membership of each row of `x` (`rows x dim`) in the configured set;
 * writes 1 or 0 per row.
 */
enum CafmStatus cafm_constraint_contains(const struct CafmConfig *cfg,
                                         const double *x,
                                         size_t rows,
                                         size_t dim,
                                         uint8_t *out);

/**
 * `n` samples of a built-in task's target (`box`, `two_boxes`, `ball8`,
 * `ball20`, `subspace`) into `out` (`n x dim`). `dim` must match the task.
 */
enum CafmStatus cafm_target_sample(const char *task,
                                   size_t n,
                                   uint64_t seed,
                                   size_t dim,
                                   double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAFM_H */
