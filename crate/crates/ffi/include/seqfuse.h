#ifndef SEQFUSE_H
#define SEQFUSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SqfStatus {
  SQF_STATUS_OK = 0,
  SQF_STATUS_NULL_POINTER = 1,
  SQF_STATUS_INVALID_ARGUMENT = 2,
  SQF_STATUS_CONFIG = 3,
  SQF_STATUS_IO = 4,
  SQF_STATUS_MODEL = 5,
  SQF_STATUS_BUFFER_TOO_SMALL = 6,
  SQF_STATUS_PANIC = 7,
} SqfStatus;

/**
 * A loaded or freshly built fusion model.
 */
typedef struct SqfModel SqfModel;

/**
 * One generated phantom patient.
 */
typedef struct SqfVolume SqfVolume;

/**
 * Pooled detection scores for one volume. Undefined values are NaN.
 */
typedef struct SqfDetection {
  double map_score;
  double max_sensitivity;
  double mean_tp_dice;
  size_t n_gt;
  size_t n_predictions;
  size_t n_true_positives;
} SqfDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *sqf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sqf_version(void);

/**
 * Default phantom spec as JSON. Free with [`sqf_string_free`].
 *
 * # Safety
 * `out_json` must be a valid pointer.
 */
enum SqfStatus sqf_default_phantom_spec(char **out_json);

/**
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void sqf_string_free(char *s);

/**
 * Generates one phantom patient from a JSON spec.
 *
 * # Safety
 * `spec_json` and `patient_id` must be NUL-terminated; `out_volume` valid.
 */
enum SqfStatus sqf_phantom_generate(const char *spec_json,
                                    const char *patient_id,
                                    struct SqfVolume **out_volume);

/**
 * # Safety
 * `volume` must come from [`sqf_phantom_generate`] and not be freed twice.
 */
void sqf_volume_free(struct SqfVolume *volume);

/**
 * Writes `(z, y, x)` voxel counts into `out_shape[0..3]`.
 *
 * # Safety
 * `volume` must be a live handle and `out_shape` hold three values.
 */
enum SqfStatus sqf_volume_shape(const struct SqfVolume *volume, size_t *out_shape);

/**
 * Number of lesion components in the ground truth.
 *
 * # Safety
 * `volume` must be a live handle; `out_count` valid.
 */
enum SqfStatus sqf_volume_lesion_count(const struct SqfVolume *volume, size_t *out_count);

/**
 * Copies the named sequence into `buffer` (z-major, `len` floats).
 *
 * # Safety
 * `volume` must be a live handle, `name` NUL-terminated and `buffer` hold
 * `len` floats.
 */
enum SqfStatus sqf_volume_copy_sequence(const struct SqfVolume *volume,
                                        const char *name,
                                        float *buffer,
                                        size_t len);

/**
 * Copies the ground-truth mask as 0/1 bytes.
 *
 * # Safety
 * `volume` must be a live handle and `buffer` hold `len` bytes.
 */
enum SqfStatus sqf_volume_copy_mask(const struct SqfVolume *volume, uint8_t *buffer, size_t len);

/**
 * Draws one integration-level dropout mask: `out_present[i]` is 1 for kept
 * sequences. `out_scale` receives the survivor upweighting factor.
 *
 * # Safety
 * `out_present` must hold `n_seq` bytes; `out_scale` may be null.
 */
enum SqfStatus sqf_draw_drop_mask(double p_drop,
                                  size_t n_seq,
                                  uint64_t seed,
                                  uint8_t *out_present,
                                  double *out_scale);

/**
 * Lesion detection scores of one probability volume against a 0/1 mask.
 *
 * # Safety
 * `prob` and `mask` must each hold `shape[0]·shape[1]·shape[2]` values,
 * `shape` and `spacing_mm` three values each.
 */
enum SqfStatus sqf_evaluate(const double *prob,
                            const uint8_t *mask,
                            const size_t *shape,
                            const double *spacing_mm,
                            struct SqfDetection *out_detection);

/**
 * Builds a freshly initialised model from a JSON fusion config.
 *
 * # Safety
 * `config_json` must be NUL-terminated; `out_model` valid.
 */
enum SqfStatus sqf_model_build(const char *config_json, uint64_t seed, struct SqfModel **out_model);

/**
 * Loads a checkpoint written by training.
 *
 * # Safety
 * `path` must be NUL-terminated; `out_model` valid.
 */
enum SqfStatus sqf_model_load(const char *path, struct SqfModel **out_model);

/**
 * # Safety
 * `model` must be a live handle; `path` NUL-terminated.
 */
enum SqfStatus sqf_model_save(const struct SqfModel *model, const char *path);

/**
 * # Safety
 * `model` must come from this library and not be freed twice.
 */
void sqf_model_free(struct SqfModel *model);

/**
 * Expected input channels (sequences × slices) and distinct scalar
 * parameters.
 *
 * # Safety
 * `model` must be a live handle; outputs may be null.
 */
enum SqfStatus sqf_model_info(const struct SqfModel *model,
                              size_t *out_in_channels,
                              size_t *out_param_count);

/**
 * Foreground probabilities for a batch `(n, c, h, w)` written to `output`
 * as `(n, h, w)`.
 *
 * # Safety
 * `input` must hold `n·c·h·w` values and `output` `n·h·w`.
 */
enum SqfStatus sqf_model_predict(const struct SqfModel *model,
                                 const double *input,
                                 size_t n,
                                 size_t c,
                                 size_t h,
                                 size_t w,
                                 double *output);

/**
 * Number of canonical sequences; names via [`sqf_canonical_sequence`].
 */
size_t sqf_canonical_sequence_count(void);

/**
 * Name of canonical sequence `i`, or null when out of range. Static.
 */
const char *sqf_canonical_sequence(size_t i);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SEQFUSE_H */
