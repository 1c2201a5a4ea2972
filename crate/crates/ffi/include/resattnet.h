#ifndef RESATTNET_H
#define RESATTNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VnetStatus {
  VNET_STATUS_OK = 0,
  VNET_STATUS_NULL_POINTER = 1,
  VNET_STATUS_INVALID_ARGUMENT = 2,
  VNET_STATUS_IO = 3,
  VNET_STATUS_FORMAT = 4,
  VNET_STATUS_SHAPE = 5,
  VNET_STATUS_CHECKPOINT_MISMATCH = 6,
  VNET_STATUS_UNKNOWN_LAYER = 7,
  VNET_STATUS_BUFFER_TOO_SMALL = 8,
  VNET_STATUS_PANIC = 9,
} VnetStatus;

/*
 Opaque model handle.
 */
typedef struct VnetModel VnetModel;

/*
 Opaque single-channel volume handle, (D, H, W).
 */
typedef struct VnetVolume VnetVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. The pointer
 stays valid until the next API call on the same thread.
 */
const char *vnet_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *vnet_version(void);

/*
 Builds a freshly initialized model from a preset name for inputs of
 `depth × height × width` voxels. `use_f64` selects double precision.

 # Safety
 `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VnetStatus vnet_model_build(const char *name,
                                 double width_mult,
                                 uintptr_t depth,
                                 uintptr_t height,
                                 uintptr_t width,
                                 uint64_t seed,
                                 bool use_f64,
                                 struct VnetModel **out);

/*
 Loads a checkpoint in its stored precision.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VnetStatus vnet_model_load(const char *path, struct VnetModel **out);

/*
 # Safety
 `model` must come from this library; `path` must be NUL-terminated.
 */
enum VnetStatus vnet_model_save(const struct VnetModel *model, const char *path);

/*
 Frees a model. NULL is ignored.

 # Safety
 `model` must come from this library and not be used afterwards.
 */
void vnet_model_free(struct VnetModel *model);

/*
 # Safety
 `model` must come from this library; `out` must be valid.
 */
enum VnetStatus vnet_model_param_count(const struct VnetModel *model, uintptr_t *out);

/*
 Writes the model's expected input dims (D, H, W) to `dims`.

 # Safety
 `model` must come from this library; `dims` must hold 3 values.
 */
enum VnetStatus vnet_model_input_dims(const struct VnetModel *model, uintptr_t *dims);

/*
 Reads a NIfTI-1 or VRAW volume and normalizes it to zero mean and unit
 variance.

 # Safety
 `path` must be NUL-terminated and `out` valid.
 */
enum VnetStatus vnet_volume_read(const char *path, struct VnetVolume **out);

/*
 Copies `depth × height × width` floats (W fastest) into a new volume,
 normalizing them when `normalized` is true.

 # Safety
 `data` must point to `depth * height * width` floats; `out` must be valid.
 */
enum VnetStatus vnet_volume_from_data(const float *data,
                                      uintptr_t depth,
                                      uintptr_t height,
                                      uintptr_t width,
                                      bool normalized,
                                      struct VnetVolume **out);

/*
 # Safety
 `volume` must come from this library; `dims` must hold 3 values.
 */
enum VnetStatus vnet_volume_dims(const struct VnetVolume *volume, uintptr_t *dims);

/*
 Frees a volume. NULL is ignored.

 # Safety
 `volume` must come from this library and not be used afterwards.
 */
void vnet_volume_free(struct VnetVolume *volume);

/*
 Eval-mode class probabilities for one volume, whose dims must match the
 model's input dims. `probs` receives `num_classes` values.

 # Safety
 Handles must come from this library; `probs` must hold `len` doubles.
 */
enum VnetStatus vnet_predict(const struct VnetModel *model,
                             const struct VnetVolume *volume,
                             double *probs,
                             uintptr_t len);

/*
 Grad-CAM heatmap for `class` at `layer` (NULL = deepest feature map),
 upsampled to the volume's dims and written to `out` (D·H·W floats).

 # Safety
 Handles must come from this library; `layer` is NULL or NUL-terminated;
 `out` must hold `len` floats.
 */
enum VnetStatus vnet_gradcam(const struct VnetModel *model,
                             const struct VnetVolume *volume,
                             uintptr_t class_,
                             const char *layer,
                             float *out,
                             uintptr_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RESATTNET_H */
