#ifndef MGF_H
#define MGF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every call.
typedef enum MgfStatus {
  MGF_STATUS_OK = 0,
  MGF_STATUS_NULL_POINTER = 1,
  MGF_STATUS_INVALID_ARGUMENT = 2,
  MGF_STATUS_IO = 3,
  MGF_STATUS_CHECKPOINT = 4,
  MGF_STATUS_BUFFER_TOO_SMALL = 5,
  MGF_STATUS_INTERNAL = 6,
} MgfStatus;

// Opaque model handle.
typedef struct MgfModel MgfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next mgf call on the same thread.
const char *mgf_last_error(void);

// Loads a checkpoint file and writes a new handle to `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum MgfStatus mgf_model_load(const char *path, struct MgfModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `handle` must come from `mgf_model_load` and not be used afterwards.
void mgf_model_free(struct MgfModel *handle);

// Observation length, prediction horizon and number of prior components.
//
// # Safety
// `handle` must be live; output pointers may be null to skip a value.
enum MgfStatus mgf_model_dims(const struct MgfModel *handle,
                              size_t *t_obs,
                              size_t *t_fut,
                              size_t *k);

// Current prior version.
//
// # Safety
// `handle` must be live and `out` valid.
enum MgfStatus mgf_prior_version(const struct MgfModel *handle, uint64_t *out);

// Draws `m` trajectories for a history of `n_points` (x, y) pairs.
//
// `out_xy` receives `m * t_fut * 2` absolute coordinates, row-major by
// candidate then step. `out_components` (m entries) and `out_log_probs`
// (m entries) may be null. With `clustering` nonzero, `j` samples are drawn
// and reduced to `m` centroids.
//
// # Safety
// `history` must hold `2 * n_points` doubles and `out_xy` `out_len` doubles.
enum MgfStatus mgf_predict(const struct MgfModel *handle,
                           const double *history,
                           size_t n_points,
                           size_t m,
                           uint64_t seed,
                           int32_t clustering,
                           size_t j,
                           double *out_xy,
                           size_t out_len,
                           size_t *out_components,
                           double *out_log_probs);

// Replaces the prior weights (renormalized) and bumps the prior version.
//
// # Safety
// `handle` must be live and `weights` hold `k` doubles.
enum MgfStatus mgf_set_weights(struct MgfModel *handle, const double *weights, size_t k);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MGF_H */
