#ifndef GMCML_H
#define GMCML_H

#include <stddef.h>
#include <stdint.h>

typedef enum GmcmlStatus {
  GMCML_STATUS_OK = 0,
  GMCML_STATUS_NULL_POINTER = 1,
  GMCML_STATUS_INVALID_ARGUMENT = 2,
  GMCML_STATUS_SHAPE_MISMATCH = 3,
  GMCML_STATUS_IO = 4,
  GMCML_STATUS_CHECKPOINT = 5,
  GMCML_STATUS_DATASET = 6,
  GMCML_STATUS_NUMERIC = 7,
  GMCML_STATUS_BUFFER_TOO_SMALL = 8,
  GMCML_STATUS_OUT_OF_RANGE = 9,
  GMCML_STATUS_PANIC = 10,
} GmcmlStatus;

typedef enum GmcmlModes {
  GMCML_MODES_CENTERED = 0,
  GMCML_MODES_SHIFTED = 1,
  GMCML_MODES_BOTH = 2,
} GmcmlModes;

typedef enum GmcmlSplit {
  GMCML_SPLIT_TRAIN = 0,
  GMCML_SPLIT_TEST = 1,
} GmcmlSplit;

// An in-memory rendered dataset.
typedef struct GmcmlDataset GmcmlDataset;

// A trained model loaded from a checkpoint.
typedef struct GmcmlModel GmcmlModel;

typedef struct GmcmlRenderConfig {
  uint64_t seed;
  size_t classes;
  size_t per_class;
  size_t test_per_class;
  size_t resolution;
  enum GmcmlModes modes;
  uint32_t subdivision;
} GmcmlRenderConfig;

typedef struct GmcmlSampleInfo {
  size_t category;
  double pose[3];
  double light;
  enum GmcmlSplit split;
} GmcmlSampleInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Length in bytes of the last error message on this thread, excluding
// the terminating NUL.
size_t gmcml_last_error_length(void);

// Copies the last error message, NUL terminated and truncated to fit.
// Returns the number of bytes written, excluding the NUL.
//
// # Safety
// `buf` must point to `cap` writable bytes or be null.
size_t gmcml_last_error_message(char *buf, size_t cap);

// Static NUL-terminated crate version.
const char *gmcml_version(void);

// Loads the model weights stored in a training checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum GmcmlStatus gmcml_model_load(const char *path, struct GmcmlModel **out);

// # Safety
// `model` must come from [`gmcml_model_load`] and not be used afterwards.
void gmcml_model_free(struct GmcmlModel *model);

// Input side length, number of classes and descriptor length.
//
// # Safety
// `model` must be a live handle; each out pointer may be null.
enum GmcmlStatus gmcml_model_dims(const struct GmcmlModel *model,
                                  size_t *resolution,
                                  size_t *classes,
                                  size_t *descriptor_len);

// Runs one image through both networks without corruption. `mask_out`
// receives `3 * S * S` values, `descriptor_out` and `logits_out` the
// lengths reported by [`gmcml_model_dims`]. Any output may be null.
//
// # Safety
// `image` must point to `image_len` doubles; each non-null output must
// point to at least its stated capacity.
enum GmcmlStatus gmcml_model_infer(const struct GmcmlModel *model,
                                   const double *image,
                                   size_t image_len,
                                   double *mask_out,
                                   size_t mask_cap,
                                   double *descriptor_out,
                                   size_t descriptor_cap,
                                   double *logits_out,
                                   size_t logits_cap);

// Renders a dataset in memory.
//
// # Safety
// `config` must be readable; `out` must be writable.
enum GmcmlStatus gmcml_dataset_render(const struct GmcmlRenderConfig *config,
                                      struct GmcmlDataset **out);

// # Safety
// `dataset` must come from [`gmcml_dataset_render`] and not be used afterwards.
void gmcml_dataset_free(struct GmcmlDataset *dataset);

// Number of pairs, or 0 for a null handle.
//
// # Safety
// `dataset` must be a live handle or null.
size_t gmcml_dataset_len(const struct GmcmlDataset *dataset);

// Copies pair `index`: the image and mask (`3 * S * S` values each) and
// its labels. Any output may be null.
//
// # Safety
// `dataset` must be a live handle; each non-null output must point to at
// least its stated capacity.
enum GmcmlStatus gmcml_dataset_get(const struct GmcmlDataset *dataset,
                                   size_t index,
                                   double *image_out,
                                   size_t image_cap,
                                   double *mask_out,
                                   size_t mask_cap,
                                   struct GmcmlSampleInfo *info_out);

// Writes the dataset as PNG pairs plus `meta.jsonl` under `dir`.
//
// # Safety
// `dataset` must be a live handle; `dir` a NUL-terminated string.
enum GmcmlStatus gmcml_dataset_write(const struct GmcmlDataset *dataset, const char *dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GMCML_H */
