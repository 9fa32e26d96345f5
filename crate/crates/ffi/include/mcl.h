#ifndef MCL_H
#define MCL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum MclStatus {
  MCL_STATUS_OK = 0,
  // Null pointer, bad length or non-UTF-8 path.
  MCL_STATUS_INVALID_ARGUMENT = 1,
  MCL_STATUS_CONTRACT = 2,
  MCL_STATUS_CONFIG = 3,
  MCL_STATUS_IO = 4,
  MCL_STATUS_FORMAT = 5,
  MCL_STATUS_NUMERIC = 6,
  MCL_STATUS_PANIC = 7,
} MclStatus;

// A labeled dataset held in memory.
typedef struct MclDataset MclDataset;

// A loaded checkpoint.
typedef struct MclModel MclModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. Valid until
// the next failing call on the same thread.
const char *mcl_last_error(void);

// Library version as a static NUL-terminated string.
const char *mcl_version(void);

// Load a checkpoint written by `mcl train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum MclStatus mcl_model_load(const char *path, struct MclModel **out);

// # Safety
// `model` must come from [`mcl_model_load`] and not be freed twice. Null is ignored.
void mcl_model_free(struct MclModel *model);

// Number of classes, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t mcl_model_num_classes(const struct MclModel *model);

// Number of factors (length of the weight vector), or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t mcl_model_num_factors(const struct MclModel *model);

// Input height, width and channels.
//
// # Safety
// `model` must be a live handle; the three outputs must be writable.
enum MclStatus mcl_model_input_shape(const struct MclModel *model,
                                     uintptr_t *height,
                                     uintptr_t *width,
                                     uintptr_t *channels);

// Name of factor `index` in the model's catalog, or null when out of range.
// The string lives as long as the process.
//
// # Safety
// `model` must be null or a live handle.
const char *mcl_model_factor_name(const struct MclModel *model, uintptr_t index);

// Classify one image given as HWC floats in [0, 1].
//
// Writes the label to `label`. When `weights` is non-null it receives
// `weights_len` mapping weights, which must equal [`mcl_model_num_factors`].
// `causal` forces counterfactual analysis for variants that skip it.
//
// # Safety
// `pixels` must point to `len` floats; `label` must be writable; `weights`
// must be null or point to `weights_len` writable doubles.
enum MclStatus mcl_model_infer(const struct MclModel *model,
                               const float *pixels,
                               uintptr_t len,
                               bool causal,
                               uint32_t *label,
                               double *weights,
                               uintptr_t weights_len);

// Load a dataset: an IDX image file (labels found alongside) or a manifest
// written by `mcl gen-corrupt`. `limit` of 0 loads everything.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum MclStatus mcl_dataset_load(const char *path, uintptr_t limit, struct MclDataset **out);

// # Safety
// `dataset` must come from [`mcl_dataset_load`] and not be freed twice. Null is ignored.
void mcl_dataset_free(struct MclDataset *dataset);

// Number of samples, or 0 for a null handle.
//
// # Safety
// `dataset` must be null or a live handle.
uintptr_t mcl_dataset_len(const struct MclDataset *dataset);

// Accuracy in percent and mean cross-entropy of `model` on `dataset`.
// Either output may be null.
//
// # Safety
// Both handles must be live; non-null outputs must be writable.
enum MclStatus mcl_model_evaluate(const struct MclModel *model,
                                  const struct MclDataset *dataset,
                                  double *accuracy,
                                  double *loss);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MCL_H */
