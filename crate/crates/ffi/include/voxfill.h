#ifndef VOXFILL_H
#define VOXFILL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VfMethod {
  VF_METHOD_FULL = 0,
  VF_METHOD_BASELINE = 1,
  VF_METHOD_WO_ERS = 2,
  VF_METHOD_WO_PNS = 3,
  VF_METHOD_WO_IAS = 4,
  VF_METHOD_IAS10 = 5,
} VfMethod;

typedef enum VfStatus {
  VF_STATUS_OK = 0,
  VF_STATUS_NULL_POINTER = 1,
  VF_STATUS_INVALID_ARGUMENT = 2,
  VF_STATUS_IO = 3,
  VF_STATUS_MODEL = 4,
  VF_STATUS_SAMPLER = 5,
  VF_STATUS_METRIC = 6,
  VF_STATUS_PANIC = 7,
} VfStatus;

/**
 * Point cloud.
 */
typedef struct VfCloud VfCloud;

/**
 * Loaded backbone checkpoint.
 */
typedef struct VfModel VfModel;

/**
 * Sampler settings. Obtain defaults from `vf_sampler_config_default`.
 */
typedef struct VfSamplerConfig {
  uint32_t steps;
  uint64_t seed;
  double eta;
  enum VfMethod method;
  /**
   * Family label, or a negative value for unconditional sampling.
   */
  int32_t label;
  double guidance;
  /**
   * Nonzero: deterministic-noise mode.
   */
  uint8_t zero_noise;
  /**
   * Nonzero: voxelize the partial as given instead of fitting it to the unit cube.
   */
  uint8_t canonical_frame;
} VfSamplerConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the next call.
 */
const char *vf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *vf_version(void);

struct VfSamplerConfig vf_sampler_config_default(void);

/**
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VfStatus vf_model_load(const char *dir, struct VfModel **out);

/**
 * # Safety
 * `model` must come from `vf_model_load` and not be freed twice.
 */
void vf_model_free(struct VfModel *model);

/**
 * Grid resolution of the loaded model.
 *
 * # Safety
 * `model` must be a live handle.
 */
size_t vf_model_resolution(const struct VfModel *model);

/**
 * Copies `n` points from `xyz` (`3 * n` doubles, interleaved).
 *
 * # Safety
 * `xyz` must point to `3 * n` readable doubles and `out` must be valid.
 */
enum VfStatus vf_cloud_new(const double *xyz, size_t n, struct VfCloud **out);

/**
 * Reads a PLY, OBJ or XYZ file.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum VfStatus vf_cloud_read(const char *path, struct VfCloud **out);

/**
 * # Safety
 * `cloud` must be a live handle and `path` NUL-terminated.
 */
enum VfStatus vf_cloud_write(const struct VfCloud *cloud, const char *path);

/**
 * # Safety
 * `cloud` must be a live handle or null.
 */
size_t vf_cloud_len(const struct VfCloud *cloud);

/**
 * Copies up to `capacity` points into `xyz` and returns how many were written.
 *
 * # Safety
 * `xyz` must have room for `3 * capacity` doubles.
 */
size_t vf_cloud_copy(const struct VfCloud *cloud, double *xyz, size_t capacity);

/**
 * # Safety
 * `cloud` must come from this library and not be freed twice.
 */
void vf_cloud_free(struct VfCloud *cloud);

/**
 * Completes `partial`; the result is a new cloud owned by the caller.
 *
 * # Safety
 * All pointers must be valid; `cfg` may be null for defaults.
 */
enum VfStatus vf_complete(const struct VfModel *model,
                          const struct VfCloud *partial,
                          const struct VfSamplerConfig *cfg,
                          struct VfCloud **out);

/**
 * Symmetric chamfer distance with the default subsample size.
 *
 * # Safety
 * `a`, `b` must be live handles and `out` valid.
 */
enum VfStatus vf_chamfer(const struct VfCloud *a, const struct VfCloud *b, double *out);

/**
 * Earth mover's distance with the default subsample size.
 *
 * # Safety
 * `a`, `b` must be live handles and `out` valid.
 */
enum VfStatus vf_emd(const struct VfCloud *a, const struct VfCloud *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VOXFILL_H */
