#ifndef SEGFORGE_H
#define SEGFORGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Codes 1 to 6 match the command-line exit codes.
 */
typedef enum {
  SF_STATUS_OK = 0,
  SF_STATUS_INTERNAL = 1,
  SF_STATUS_CONFIG = 2,
  SF_STATUS_DATA = 3,
  SF_STATUS_NUMERIC = 4,
  SF_STATUS_CHECKPOINT = 5,
  SF_STATUS_IO = 6,
  SF_STATUS_NULL_POINTER = 7,
  SF_STATUS_INVALID_ARGUMENT = 8,
  SF_STATUS_PANIC = 9,
} SfStatus;

/**
 * Accumulated confusion counts for IoU.
 */
typedef struct SfConfusion SfConfusion;

/**
 * A segmentation network plus the input normalization it was trained with.
 */
typedef struct SfModel SfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none failed.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *sf_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sf_version(void);

/**
 * Polynomial learning-rate schedule: `max(min_lr, lr0 * (1 - epoch/total)^power)`.
 */
double sf_poly_lr(size_t epoch, size_t total_epochs, double lr0, double power, double min_lr);

/**
 * Builds a freshly initialized model from a JSON model configuration.
 * A null or empty `config_json` selects the default configuration.
 *
 * # Safety
 * `config_json` must be null or a NUL-terminated string; `out` must be a
 * valid pointer to write the handle to.
 */
SfStatus sf_model_new(const char *config_json, SfModel **out);

/**
 * Loads a model, with its normalization statistics, from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
SfStatus sf_model_load(const char *path, SfModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from `sf_model_new`/`sf_model_load` not yet freed.
 */
void sf_model_free(SfModel *model);

/**
 * Number of trainable scalars, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t sf_model_parameter_count(const SfModel *model);

/**
 * Number of output classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t sf_model_num_classes(const SfModel *model);

/**
 * Input channels expected by the model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t sf_model_in_channels(const SfModel *model);

/**
 * Output stride; input height and width must be multiples of it. 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t sf_model_output_stride(const SfModel *model);

/**
 * Whether the model carries normalization statistics (checkpoints usually do).
 *
 * # Safety
 * `model` must be null or a live handle.
 */
bool sf_model_has_normalization(const SfModel *model);

/**
 * Runs eval-mode inference and writes per-pixel class labels.
 *
 * `input` holds `n * c * h * w` floats in NCHW order. When `normalize` is
 * true the stored per-channel statistics are applied first; otherwise the
 * input is used as given. `labels` receives `n * h * w` bytes.
 *
 * # Safety
 * `input` must point to `input_len` floats and `labels` to `labels_len` bytes.
 */
SfStatus sf_model_predict(const SfModel *model,
                          const float *input,
                          size_t input_len,
                          size_t n,
                          size_t c,
                          size_t h,
                          size_t w,
                          bool normalize,
                          uint8_t *labels,
                          size_t labels_len);

/**
 * Creates an empty confusion matrix over `num_classes` classes (at least 1,
 * at most 256). Returns null and sets the last error on bad input.
 */
SfConfusion *sf_confusion_new(size_t num_classes);

/**
 * Releases a confusion matrix. Null is ignored.
 *
 * # Safety
 * `cm` must be null or a live handle from `sf_confusion_new`.
 */
void sf_confusion_free(SfConfusion *cm);

/**
 * Adds `len` predicted/target label pairs.
 *
 * # Safety
 * `cm` must be a live handle; `predicted` and `target` must each point to `len` bytes.
 */
SfStatus sf_confusion_update(SfConfusion *cm,
                             const uint8_t *predicted,
                             const uint8_t *target,
                             size_t len);

/**
 * IoU of one class. Writes NaN when the class appears in neither prediction nor target.
 *
 * # Safety
 * `cm` must be a live handle and `out` a valid pointer.
 */
SfStatus sf_confusion_class_iou(const SfConfusion *cm, size_t class_, double *out);

/**
 * Mean IoU over the classes that appear in prediction or target.
 *
 * # Safety
 * `cm` must be a live handle and `out` a valid pointer.
 */
SfStatus sf_confusion_mean_iou(const SfConfusion *cm, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEGFORGE_H */
