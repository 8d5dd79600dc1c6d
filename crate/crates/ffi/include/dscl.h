#ifndef DSCL_H
#define DSCL_H

#include <stddef.h>
#include <stdint.h>

typedef enum DsclStatus {
  DSCL_STATUS_OK = 0,
  DSCL_STATUS_NULL_POINTER = 1,
  DSCL_STATUS_INVALID_ARGUMENT = 2,
  DSCL_STATUS_CONFIG = 3,
  DSCL_STATUS_DATA = 4,
  DSCL_STATUS_SHAPE = 5,
  DSCL_STATUS_NUMERICS = 6,
  DSCL_STATUS_EVAL = 7,
  DSCL_STATUS_IO = 8,
  DSCL_STATUS_CHECKPOINT = 9,
  DSCL_STATUS_PANIC = 10,
  DSCL_STATUS_OTHER = 11,
} DsclStatus;

typedef struct DsclDataset DsclDataset;

typedef struct DsclModel DsclModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *dscl_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call into the library from the same thread.
 */
const char *dscl_last_error_message(void);

/**
 * Frees a string returned by this library.
 */
void dscl_string_free(char *s);

/**
 * Feature-extractor parameter count of `arch` ("resnet18", "ds", ...).
 * `config_json` is an architecture config object or NULL for defaults.
 */
enum DsclStatus dscl_fe_param_count(const char *arch, const char *config_json, uint64_t *out_count);

/**
 * Builds a freshly initialised multi-head model with `n_tasks` heads of
 * `task_classes[t]` outputs each.
 */
enum DsclStatus dscl_model_new(const char *arch,
                               const char *config_json,
                               const size_t *task_classes,
                               size_t n_tasks,
                               uint64_t seed,
                               struct DsclModel **out_model);

void dscl_model_free(struct DsclModel *model);

/**
 * Feature-extractor and total (extractor plus every head) parameter counts.
 */
enum DsclStatus dscl_model_param_counts(const struct DsclModel *model,
                                        uint64_t *out_fe,
                                        uint64_t *out_total);

enum DsclStatus dscl_model_n_tasks(const struct DsclModel *model, size_t *out_n);

enum DsclStatus dscl_model_task_classes(const struct DsclModel *model,
                                        size_t task,
                                        size_t *out_classes);

/**
 * Eval-mode logits of head `task` for `n` images laid out N×3×S×S, where S
 * is the model's input size. Writes `n * classes` floats to `out_logits`,
 * whose capacity `out_len` must be large enough.
 */
enum DsclStatus dscl_model_predict(const struct DsclModel *model,
                                   const float *images,
                                   size_t n,
                                   size_t task,
                                   float *out_logits,
                                   size_t out_len);

enum DsclStatus dscl_model_save(const struct DsclModel *model, const char *path);

/**
 * Loads weights and running statistics into an existing model of the same
 * architecture.
 */
enum DsclStatus dscl_model_load(struct DsclModel *model, const char *path);

/**
 * Generates the two-task color/shape benchmark.
 */
enum DsclStatus dscl_dataset_fig1(size_t image_size,
                                  size_t n_per_class,
                                  uint64_t seed,
                                  struct DsclDataset **out_train,
                                  struct DsclDataset **out_test);

/**
 * Loads a packed `.dsds` file or a class-per-directory PPM tree, resized
 * to `input_size`.
 */
enum DsclStatus dscl_dataset_load(const char *path,
                                  size_t input_size,
                                  struct DsclDataset **out_dataset);

void dscl_dataset_free(struct DsclDataset *dataset);

/**
 * Sample count, class count and image side length.
 */
enum DsclStatus dscl_dataset_info(const struct DsclDataset *dataset,
                                  size_t *out_len,
                                  size_t *out_classes,
                                  size_t *out_image_size);

/**
 * Borrowed pointer to the N×3×S×S pixel buffer, valid while the handle
 * lives. NULL for a null handle.
 */
const float *dscl_dataset_images(const struct DsclDataset *dataset);

/**
 * Copies the labels into `out_labels`, which must hold `len` entries.
 */
enum DsclStatus dscl_dataset_labels(const struct DsclDataset *dataset,
                                    size_t *out_labels,
                                    size_t len);

/**
 * Seeded partition of `n_classes` classes into `n_tasks` tasks. Writes the
 * task of every class to `out_task_of_class` (length `n_classes`).
 */
enum DsclStatus dscl_split_tasks(size_t n_classes,
                                 size_t n_tasks,
                                 uint64_t seed,
                                 size_t *out_task_of_class);

/**
 * Mean final accuracy and mean forgetting of a row-major `n_tasks` ×
 * `n_tasks` accuracy matrix (percent). Entries above the diagonal are
 * ignored.
 */
enum DsclStatus dscl_metrics(const double *matrix,
                             size_t n_tasks,
                             double *out_mean_acc,
                             double *out_mean_forgetting);

/**
 * Runs a full experiment described by a JSON config (the same format the
 * `dscl` command accepts), writing run directories under its `out_dir`.
 * On success `out_metrics_json` receives a JSON array with one metrics
 * object per seed; free it with [`dscl_string_free`].
 */
enum DsclStatus dscl_train_json(const char *config_json, char **out_metrics_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DSCL_H */
