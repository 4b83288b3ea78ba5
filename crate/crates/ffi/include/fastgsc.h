#ifndef FASTGSC_H
#define FASTGSC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FgscStatus {
  FGSC_STATUS_OK = 0,
  FGSC_STATUS_NULL_POINTER = 1,
  FGSC_STATUS_INVALID_ARGUMENT = 2,
  FGSC_STATUS_CONFIG_INVALID = 3,
  FGSC_STATUS_MISSING_CHECKPOINT = 4,
  FGSC_STATUS_NUMERICAL_DIVERGENCE = 5,
  FGSC_STATUS_BUFFER_TOO_SMALL = 6,
  FGSC_STATUS_IO = 7,
  FGSC_STATUS_PANIC = 8,
} FgscStatus;

// Trained conditional denoiser loaded from a checkpoint.
typedef struct FgscDenoiser FgscDenoiser;

// Generated world: unit table, offsets and noise level.
typedef struct FgscWorld FgscWorld;

typedef struct FgscLatency {
  double tau_e;
  double tau_m;
  size_t m_steps;
  size_t segment;
} FgscLatency;

typedef struct FgscLatencyReport {
  double total_latency;
  double residual_latency;
} FgscLatencyReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *fgsc_version(void);

// Copies the calling thread's last error message into `buf` (truncated, always
// NUL-terminated when `len > 0`). Returns the full message length plus one.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t fgsc_last_error_message(char *buf, size_t len);

// Generates the default world from `seed`.
//
// # Safety
// `out` must be valid for writing a pointer.
enum FgscStatus fgsc_world_new(uint64_t seed, struct FgscWorld **out);

// # Safety
// `w` must come from [`fgsc_world_new`] and not be used afterwards. Null is ignored.
void fgsc_world_free(struct FgscWorld *w);

// Latent dimension and number of units in the table.
//
// # Safety
// `w` must be a live world; `dim` and `n_units` valid for writing.
enum FgscStatus fgsc_world_shape(const struct FgscWorld *w, size_t *dim, size_t *n_units);

// Draws a clean sample for the prompt `ids[0..n]` into `out[0..dim]`.
//
// # Safety
// Pointers must be valid for the given lengths.
enum FgscStatus fgsc_world_sample_clean(const struct FgscWorld *w,
                                        const size_t *ids,
                                        size_t n,
                                        uint64_t seed,
                                        double *out,
                                        size_t out_len);

// Score of `sample[0..dim]` against the prompt `ids[0..n]`, in [0, 1].
//
// # Safety
// Pointers must be valid for the given lengths.
enum FgscStatus fgsc_score(const struct FgscWorld *w,
                           const double *sample,
                           size_t dim,
                           const size_t *ids,
                           size_t n,
                           double *out);

// Latency of sending `n_units` before denoising starts.
//
// # Safety
// `lat` and `out` must be valid.
enum FgscStatus fgsc_conventional_latency(const struct FgscLatency *lat,
                                          size_t n_units,
                                          struct FgscLatencyReport *out);

// Latency of a parallel schedule extracting `counts[p]` units in phase `p`.
//
// # Safety
// `lat`, `out` and `counts[0..n_phases]` must be valid.
enum FgscStatus fgsc_pgsc_latency(const struct FgscLatency *lat,
                                  const size_t *counts,
                                  size_t n_phases,
                                  struct FgscLatencyReport *out);

// Loads a denoiser checkpoint from a NUL-terminated UTF-8 path.
//
// # Safety
// `path` must be a valid C string and `out` valid for writing a pointer.
enum FgscStatus fgsc_denoiser_load(const char *path, struct FgscDenoiser **out);

// # Safety
// `d` must come from [`fgsc_denoiser_load`] and not be used afterwards. Null is ignored.
void fgsc_denoiser_free(struct FgscDenoiser *d);

// Segmented sampling with the default sampler settings and correction strength
// `alpha`: unit `ids[k]` joins the condition at denoising step `arrival_steps[k]`
// (a segment boundary, or `M` for never). The result goes to `out[0..dim]`.
//
// # Safety
// Handles must be live and pointers valid for the given lengths.
enum FgscStatus fgsc_sample(const struct FgscWorld *w,
                            const struct FgscDenoiser *d,
                            const size_t *ids,
                            const size_t *arrival_steps,
                            size_t n,
                            double alpha,
                            uint64_t seed,
                            double *out,
                            size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FASTGSC_H */
