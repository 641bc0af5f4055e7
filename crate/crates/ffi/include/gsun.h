#ifndef GSUN_H
#define GSUN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result codes shared by every function.
typedef enum GsunStatus {
  GSUN_STATUS_OK = 0,
  // A required pointer argument was null.
  GSUN_STATUS_NULL_POINTER = 1,
  // Invalid parameters, shapes or input files.
  GSUN_STATUS_INVALID_INPUT = 2,
  // A numerical routine failed.
  GSUN_STATUS_NUMERIC = 3,
  // The output buffer is too small.
  GSUN_STATUS_BUFFER_TOO_SMALL = 4,
  // A Rust panic was caught at the boundary.
  GSUN_STATUS_PANIC = 5,
} GsunStatus;

// A trained estimator.
typedef struct GsunEstimator GsunEstimator;

// Replicated observations at a set of locations.
typedef struct GsunSample GsunSample;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *gsun_version(void);

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to fit) and returns the full message length.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t gsun_last_error_message(char *buf, size_t len);

// Builds a sample from `n` locations and an `n × reps` column-major value
// matrix.
//
// # Safety
// `xs`, `ys` must hold `n` values, `values` `n * reps` values; `out` must
// be writable.
enum GsunStatus gsun_sample_new(const double *xs,
                                const double *ys,
                                size_t n,
                                const double *values,
                                size_t reps,
                                struct GsunSample **out);

// Simulates `reps` replicates of the process with parameters `theta`
// (σ², β₁, ν₁, β₂, ν₂, δ₁, δ₂) at the given locations.
//
// # Safety
// `theta` must hold 7 values, `xs` and `ys` `n` values; `out` must be
// writable.
enum GsunStatus gsun_simulate(const double *theta,
                              const double *xs,
                              const double *ys,
                              size_t n,
                              size_t reps,
                              uint64_t seed,
                              struct GsunSample **out);

// # Safety
// `sample` must be null or a handle not yet freed.
void gsun_sample_free(struct GsunSample *sample);

// # Safety
// `sample` must be a live handle; `n` and `reps` must be writable.
enum GsunStatus gsun_sample_dims(const struct GsunSample *sample, size_t *n, size_t *reps);

// Copies the column-major values into `buf`, which must hold `n * reps`
// entries.
//
// # Safety
// `sample` must be a live handle and `buf` hold `len` writable values.
enum GsunStatus gsun_sample_values(const struct GsunSample *sample, double *buf, size_t len);

// Reads a sample CSV (`x,y,rep_0,…`).
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum GsunStatus gsun_sample_read_csv(const char *path, struct GsunSample **out);

// # Safety
// `sample` must be a live handle and `path` a NUL-terminated string.
enum GsunStatus gsun_sample_write_csv(const struct GsunSample *sample, const char *path);

// Conditional mean and variance at `m` prediction locations given the
// first replicate of `observed`.
//
// # Safety
// `theta` must hold 7 values; `px`, `py`, `mean_out` and `var_out` `m`
// values each.
enum GsunStatus gsun_krige(const double *theta,
                           const struct GsunSample *observed,
                           const double *px,
                           const double *py,
                           size_t m,
                           size_t draws,
                           uint64_t seed,
                           double *mean_out,
                           double *var_out);

// Marginal PIT of a one-replicate sample under `model` (`"gaussian"`,
// `"tg"`, `"tgh"` or `"gsun"`). Writes `n` PIT values to `u_out` and the
// Kolmogorov–Smirnov statistic and p-value.
//
// # Safety
// `model` must be a NUL-terminated string, `params` hold `n_params` values
// and `u_out` `n` values, where `n` is the sample size.
enum GsunStatus gsun_pit(const char *model,
                         const double *params,
                         size_t n_params,
                         const struct GsunSample *sample,
                         double *u_out,
                         size_t len,
                         double *ks_stat,
                         double *p_value);

// Loads estimator weights written by the `gsun train` command.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum GsunStatus gsun_estimator_load(const char *path, struct GsunEstimator **out);

// # Safety
// `est` must be null or a handle not yet freed.
void gsun_estimator_free(struct GsunEstimator *est);

// Point estimate from every replicate of `sample`, written as 7 values in
// wire order. A non-positive `radius` selects the estimator's own.
//
// # Safety
// `est` and `sample` must be live handles and `theta_out` hold 7 values.
enum GsunStatus gsun_estimate(const struct GsunEstimator *est,
                              const struct GsunSample *sample,
                              double radius,
                              double *theta_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GSUN_H */
