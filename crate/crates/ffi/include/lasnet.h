#ifndef LASNET_H
#define LASNET_H

#include <stddef.h>
#include <stdint.h>

typedef enum LasnetStatus {
  LASNET_STATUS_OK = 0,
  // Null pointer, bad size, out-of-range label or invalid configuration.
  LASNET_STATUS_INVALID_ARGUMENT = 1,
  // Tensor shapes do not fit together.
  LASNET_STATUS_SHAPE = 2,
  // File missing, unreadable or malformed.
  LASNET_STATUS_IO = 3,
  // A non-finite value appeared.
  LASNET_STATUS_NUMERIC = 4,
  // An internal panic was caught.
  LASNET_STATUS_PANIC = 5,
} LasnetStatus;

// Confusion matrix accumulated over predictions.
typedef struct LasnetConfusion LasnetConfusion;

// A network configuration with its parameters.
typedef struct LasnetModel LasnetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or NULL. The pointer
// stays valid until the next call into this library from the same thread.
const char *lasnet_last_error(void);

// Library version as a static NUL-terminated string.
const char *lasnet_version(void);

// Creates a model with freshly initialised parameters.
//
// `config_json` may be NULL for the compact preset; a nonzero `num_classes`
// overrides the class count.
//
// # Safety
// `config_json` must be NULL or a NUL-terminated string; `out` must be writable.
enum LasnetStatus lasnet_model_new(const char *config_json,
                                   uint32_t num_classes,
                                   uint64_t seed,
                                   struct LasnetModel **out);

// Loads parameters written by [`lasnet_model_save`] or the command-line tool.
//
// # Safety
// String arguments must be NULL (config only) or NUL-terminated; `out` must be writable.
enum LasnetStatus lasnet_model_load(const char *config_json,
                                    uint32_t num_classes,
                                    const char *path,
                                    struct LasnetModel **out);

// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum LasnetStatus lasnet_model_save(const struct LasnetModel *model, const char *path);

// # Safety
// `model` must be NULL or a live handle from this library.
uint32_t lasnet_model_num_classes(const struct LasnetModel *model);

// Segments one image pair.
//
// `rgb` holds `3 × height × width` planar values in [0, 1], `tir` holds
// `height × width`; `labels` receives `height × width` class indices.
// Height and width must be positive multiples of 32.
//
// # Safety
// Buffers must have the stated lengths; `model` must be a live handle.
enum LasnetStatus lasnet_model_predict(const struct LasnetModel *model,
                                       const double *rgb,
                                       const double *tir,
                                       size_t height,
                                       size_t width,
                                       uint8_t *labels);

// # Safety
// `model` must be NULL or a handle not yet freed.
void lasnet_model_free(struct LasnetModel *model);

// # Safety
// `out` must be writable.
enum LasnetStatus lasnet_confusion_new(uint32_t num_classes, struct LasnetConfusion **out);

// Adds `len` (prediction, ground truth) label pairs.
//
// # Safety
// `pred` and `gt` must each hold `len` bytes.
enum LasnetStatus lasnet_confusion_accumulate(struct LasnetConfusion *cm,
                                              const uint8_t *pred,
                                              const uint8_t *gt,
                                              size_t len);

// Adds the counts of `other` into `cm`.
//
// # Safety
// Both must be live handles.
enum LasnetStatus lasnet_confusion_merge(struct LasnetConfusion *cm,
                                         const struct LasnetConfusion *other);

// Count of pixels with ground truth `gt` predicted as `pred`.
//
// # Safety
// `cm` must be a live handle and `out` writable.
enum LasnetStatus lasnet_confusion_get(const struct LasnetConfusion *cm,
                                       uint32_t gt,
                                       uint32_t pred,
                                       uint64_t *out);

// Mean class accuracy and mean IoU in percent.
//
// # Safety
// `cm` must be a live handle; outputs may be NULL to skip them.
enum LasnetStatus lasnet_confusion_scores(const struct LasnetConfusion *cm,
                                          double *macc,
                                          double *miou);

// # Safety
// `cm` must be NULL or a handle not yet freed.
void lasnet_confusion_free(struct LasnetConfusion *cm);

// Location (foreground) and edge targets of a `height × width` label map.
//
// # Safety
// `labels`, `loc` and `edge` must each hold `height × width` bytes.
enum LasnetStatus lasnet_derive_gt(const uint8_t *labels,
                                   size_t height,
                                   size_t width,
                                   uint32_t edge_radius,
                                   uint8_t *loc,
                                   uint8_t *edge);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LASNET_H */
