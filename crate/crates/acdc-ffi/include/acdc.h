/* C interface for the acdc library. Generated by the crate build script; do not edit. */

#ifndef ACDC_H
#define ACDC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code for every call. Values 2 to 4 match the CLI exit codes for
// the same failure classes; 5 and 6 cover boundary conditions that only
// exist at the C surface.
typedef enum AcdcStatus {
  ACDC_STATUS_OK = 0,
  ACDC_STATUS_CONFIG_ERROR = 2,
  ACDC_STATUS_NUMERIC_ERROR = 3,
  ACDC_STATUS_IO_ERROR = 4,
  ACDC_STATUS_NULL_POINTER = 5,
  ACDC_STATUS_INVALID_UTF8 = 6,
} AcdcStatus;

// Opaque handle to a model held at f64 precision. Checkpoints written at
// f32 load fine; values are cast on the way in.
typedef struct AcdcModel AcdcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Returns the library version as a static string; do not free it.
const char *acdc_version(void);

// Returns the message recorded by the most recent failing call on this
// thread, or an empty string if nothing has failed yet. The pointer stays
// valid until the next failing call on the same thread; do not free it.
const char *acdc_last_error(void);

// Builds a model from a preset name (toy-4layer, vgg16, resnet18,
// wrn-40-4, wrn-28-10) and a sharing scheme named as on the CLI
// (baseline, net, block, g-net, g-block, g-layer). `m` is the atom count
// per substructure; `s` is the group size, with 0 meaning ungrouped for
// g-layer and whole-extent groups otherwise. Baseline requires `m` and
// `s` to be 0. Initialization is seeded, so equal arguments rebuild
// identical parameters.
enum AcdcStatus acdc_model_new(const char *preset_name,
                               const char *scheme,
                               size_t m,
                               size_t s,
                               uint64_t seed,
                               struct AcdcModel **out);

// Reads a checkpoint produced by the CLI or by `acdc_model_save`.
enum AcdcStatus acdc_model_load(const char *path, struct AcdcModel **out);

// Writes the model as a checkpoint readable by the CLI and
// `acdc_model_load`.
enum AcdcStatus acdc_model_save(const struct AcdcModel *model, const char *path);

// Releases a handle. Passing NULL is a no-op.
void acdc_model_free(struct AcdcModel *model);

// Writes the stored parameter count (decomposed storage, not the
// reconstructed dense kernels).
enum AcdcStatus acdc_model_param_count(const struct AcdcModel *model, uint64_t *out);

// Writes the total forward FLOPs for a batch at the given input shape
// under the default convention: one FLOP per multiply-accumulate, with
// kernels reconstructed once per batch.
enum AcdcStatus acdc_model_flops(const struct AcdcModel *model,
                                 size_t channels,
                                 size_t height,
                                 size_t width,
                                 size_t batch,
                                 uint64_t *out);

// Runs an evaluation forward pass on a batch of images and writes the
// predicted class per image. `input` holds `batch * channels * height *
// width` f64 values in NCHW order and the shape must match the model's
// input; `classes_out` receives `batch` entries.
enum AcdcStatus acdc_model_predict(struct AcdcModel *model,
                                   const double *input,
                                   size_t batch,
                                   size_t channels,
                                   size_t height,
                                   size_t width,
                                   uint32_t *classes_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACDC_H */
