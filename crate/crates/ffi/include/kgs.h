#ifndef KGS_H
#define KGS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes; the non-zero values match the `kgs` CLI exit codes where
// the categories overlap.
typedef enum KgsStatus {
  KGS_STATUS_OK = 0,
  // A required pointer was null or a string was not UTF-8.
  KGS_STATUS_INVALID_ARGUMENT = 1,
  // Invalid configuration or input values.
  KGS_STATUS_CONFIG = 2,
  // File missing, unreadable or malformed.
  KGS_STATUS_IO = 3,
  // Non-finite values during rendering or training.
  KGS_STATUS_NUMERICAL = 4,
  // Internal panic caught at the boundary.
  KGS_STATUS_PANIC = 5,
} KgsStatus;

// A loaded or generated dataset.
typedef struct KgsDataset KgsDataset;

// A trainable scene model.
typedef struct KgsModel KgsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Description of the calling thread's most recent failure, or an empty
// string. Valid until the next call into this library on the same thread.
const char *kgs_last_error(void);

// Library version as a static NUL-terminated string.
const char *kgs_version(void);

// Generates one of the built-in scenes (`rolldice-lite`, `static-lite`,
// `decomp`, `single`) in memory.
//
// # Safety
// `name` is a NUL-terminated string; `out` is valid for writing a pointer.
enum KgsStatus kgs_dataset_generate(const char *name, uint64_t seed, struct KgsDataset **out);

// Reads a dataset directory.
//
// # Safety
// `dir` is a NUL-terminated path; `out` is valid for writing a pointer.
enum KgsStatus kgs_dataset_read(const char *dir, struct KgsDataset **out);

// Writes a dataset directory.
//
// # Safety
// `data` is a live dataset handle; `dir` is a NUL-terminated path.
enum KgsStatus kgs_dataset_write(const struct KgsDataset *data, const char *dir);

// Frame count and image size of a dataset.
//
// # Safety
// `data` is a live dataset handle; the outputs are valid for writing.
enum KgsStatus kgs_dataset_shape(const struct KgsDataset *data,
                                 size_t *frames,
                                 uint32_t *width,
                                 uint32_t *height);

// # Safety
// `data` is null or a handle not yet freed.
void kgs_dataset_free(struct KgsDataset *data);

// Initializes a model for `data`. `config_json` is a flat dotted-key JSON
// object of overrides, or null for the defaults.
//
// # Safety
// `data` is a live dataset handle; `config_json` is null or NUL-terminated;
// `out` is valid for writing a pointer.
enum KgsStatus kgs_model_new(const struct KgsDataset *data,
                             const char *config_json,
                             struct KgsModel **out);

// Loads a `KGS1` checkpoint.
//
// # Safety
// `path` is NUL-terminated; `out` is valid for writing a pointer.
enum KgsStatus kgs_model_load(const char *path, struct KgsModel **out);

// Saves a `KGS1` checkpoint.
//
// # Safety
// `model` is a live handle; `path` is NUL-terminated.
enum KgsStatus kgs_model_save(const struct KgsModel *model, const char *path);

// Runs up to `steps` optimizer steps (stopping at the configured iteration
// count) and reports the last step's loss through `last_loss` (may be
// null). On a numerical failure the model keeps its pre-step state.
//
// # Safety
// `model` and `data` are live handles; `last_loss` is null or writable.
enum KgsStatus kgs_model_train(struct KgsModel *model,
                               const struct KgsDataset *data,
                               uint64_t steps,
                               double *last_loss);

// Current iteration, Gaussian count and dynamic Gaussian count.
//
// # Safety
// `model` is a live handle; the outputs are valid for writing.
enum KgsStatus kgs_model_stats(const struct KgsModel *model,
                               uint64_t *iteration,
                               size_t *gaussians,
                               size_t *dynamic);

// Renders frame `frame`'s sharp image into `rgb` (row-major interleaved
// RGB in [0, 1], `len` must equal `3 * width * height`).
//
// # Safety
// Handles are live; `rgb` is valid for writing `len` doubles.
enum KgsStatus kgs_model_render(const struct KgsModel *model,
                                const struct KgsDataset *data,
                                size_t frame,
                                double *rgb,
                                size_t len);

// Mean PSNR (dB) and SSIM over the held-out frames.
//
// # Safety
// Handles are live; the outputs are valid for writing.
enum KgsStatus kgs_model_evaluate(const struct KgsModel *model,
                                  const struct KgsDataset *data,
                                  double *psnr,
                                  double *ssim);

// # Safety
// `model` is null or a handle not yet freed.
void kgs_model_free(struct KgsModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KGS_H */
