#ifndef CCL_H
#define CCL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum ccl_status {
  CCL_OK = 0,
  /**
   * Null pointer, malformed UTF-8, or an argument rejected by validation.
   */
  CCL_ERR_INVALID_ARG = 1,
  /**
   * File could not be read or written.
   */
  CCL_ERR_IO = 2,
  /**
   * File contents did not parse.
   */
  CCL_ERR_PARSE = 3,
  /**
   * Numerical or internal failure.
   */
  CCL_ERR_RUNTIME = 4,
  /**
   * Unknown sample id.
   */
  CCL_ERR_NOT_FOUND = 5,
} ccl_status;

/**
 * Opaque dataset handle.
 */
typedef struct ccl_dataset ccl_dataset;

/**
 * Opaque model handle (a loaded checkpoint).
 */
typedef struct ccl_model ccl_model;

/**
 * Evaluation metrics over the dataset's test split.
 */
typedef struct ccl_metrics {
  double mean_iou;
  double recall_03;
  double recall_05;
  double recall_07;
  uintptr_t num_sentences;
} ccl_metrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer is valid
 * until the next failing call on the same thread.
 */
const char *ccl_last_error(void);

/**
 * Generates a dataset from a JSON configuration string; pass null for the
 * built-in default configuration.
 *
 * # Safety
 * `config_json` must be null or a NUL-terminated string; `out` must be a
 * valid pointer.
 */
enum ccl_status ccl_dataset_generate(const char *config_json, struct ccl_dataset **out);

/**
 * Loads a dataset written by the library.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum ccl_status ccl_dataset_load(const char *path, struct ccl_dataset **out);

/**
 * Number of samples in each split.
 *
 * # Safety
 * `ds` must be a live dataset handle; count pointers may be null to skip.
 */
enum ccl_status ccl_dataset_counts(const struct ccl_dataset *ds,
                                   uintptr_t *labeled,
                                   uintptr_t *unlabeled,
                                   uintptr_t *test);

/**
 * Serializes the dataset's generation config as JSON into `buf`
 * (NUL-terminated, truncated to `capacity`).
 *
 * # Safety
 * `ds` must be a live handle; `buf` must have room for `capacity` bytes.
 */
enum ccl_status ccl_dataset_config_json(const struct ccl_dataset *ds,
                                        char *buf,
                                        uintptr_t capacity);

/**
 * # Safety
 * `ds` must come from `ccl_dataset_generate` or `ccl_dataset_load` and must
 * not be used afterwards. Null is a no-op.
 */
void ccl_dataset_free(struct ccl_dataset *ds);

/**
 * Loads a model checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum ccl_status ccl_model_load(const char *path, struct ccl_model **out);

/**
 * # Safety
 * `m` must come from `ccl_model_load` and must not be used afterwards.
 * Null is a no-op.
 */
void ccl_model_free(struct ccl_model *m);

/**
 * Predicts intervals for one sample. `out_intervals` receives up to
 * `capacity` (start, end) pairs, 2 doubles per sentence; `out_count`
 * receives the sentence count.
 *
 * # Safety
 * All pointers must be valid; `out_intervals` must have room for
 * `2 * capacity` doubles.
 */
enum ccl_status ccl_model_predict(const struct ccl_model *m,
                                  const struct ccl_dataset *ds,
                                  const char *sample_id,
                                  double *out_intervals,
                                  uintptr_t capacity,
                                  uintptr_t *out_count);

/**
 * Evaluates the model on the dataset's test split.
 *
 * # Safety
 * All pointers must be valid handles.
 */
enum ccl_status ccl_model_evaluate(const struct ccl_model *m,
                                   const struct ccl_dataset *ds,
                                   struct ccl_metrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CCL_H */
