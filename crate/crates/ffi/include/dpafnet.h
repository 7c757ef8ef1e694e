#ifndef DPAFNET_H
#define DPAFNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum DpafStatus {
  DPAF_STATUS_OK = 0,
  // A required pointer argument was null.
  DPAF_STATUS_NULL_ARGUMENT = 1,
  // An argument was out of range or inconsistent (sizes, pixel values,
  // non-UTF-8 paths).
  DPAF_STATUS_INVALID_ARGUMENT = 2,
  // Tensor shapes did not fit the model.
  DPAF_STATUS_SHAPE = 3,
  // The file could not be read or written.
  DPAF_STATUS_IO = 4,
  // The file was read but is not a valid checkpoint.
  DPAF_STATUS_FORMAT = 5,
  // The model configuration is invalid.
  DPAF_STATUS_CONFIG = 6,
  // An internal error, including a caught panic.
  DPAF_STATUS_INTERNAL = 7,
} DpafStatus;

// A trained or freshly initialized network.
typedef struct DpafModel DpafModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a checkpoint file. On success `*out` receives a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DpafStatus dpaf_model_load(const char *path, struct DpafModel **out);

// Builds a freshly initialized model. `config_json` is a JSON object with
// any subset of the architecture keys, or null for the default network.
//
// # Safety
// `config_json` must be null or a NUL-terminated string; `out` must be
// a valid pointer.
enum DpafStatus dpaf_model_new(const char *config_json, uint64_t seed, struct DpafModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void dpaf_model_free(struct DpafModel *model);

// Number of scalar parameters, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t dpaf_model_num_params(const struct DpafModel *model);

// Writes the model as a checkpoint (without optimizer state).
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum DpafStatus dpaf_model_save(const struct DpafModel *model, const char *path);

// Derains one image of any size. `input` and `output` hold
// `3 * height * width` planar values; they may not overlap.
//
// # Safety
// `model` must be a live handle; both buffers must have the stated length.
enum DpafStatus dpaf_model_derain(const struct DpafModel *model,
                                  const float *input,
                                  size_t height,
                                  size_t width,
                                  float *output);

// PSNR in dB with peak value 1 between two planar images. Identical
// images give positive infinity.
//
// # Safety
// Both buffers must hold `3 * height * width` values; `out` must be valid.
enum DpafStatus dpaf_psnr(const float *a, const float *b, size_t height, size_t width, double *out);

// Mean SSIM (11×11 Gaussian window, σ = 1.5) over the three channels.
// Both sides must be at least 11 pixels.
//
// # Safety
// Both buffers must hold `3 * height * width` values; `out` must be valid.
enum DpafStatus dpaf_ssim(const float *a, const float *b, size_t height, size_t width, double *out);

// Copies the calling thread's last error message into `buf` (truncated,
// always NUL-terminated when `len > 0`) and returns the full message
// length in bytes, excluding the terminator. An empty message means the
// last call succeeded.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t dpaf_last_error_message(char *buf, size_t len);

// Static, NUL-terminated name of a status code.
const char *dpaf_status_name(enum DpafStatus status);

// Library version as a static NUL-terminated string.
const char *dpaf_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DPAFNET_H */
