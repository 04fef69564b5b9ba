#ifndef TTCLUSTER_H
#define TTCLUSTER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum TtcStatus {
  TTC_STATUS_OK = 0,
  TTC_STATUS_NULL_POINTER = 1,
  // Bad index, shape mismatch or other argument out of range.
  TTC_STATUS_DOMAIN = 2,
  TTC_STATUS_CONFIG = 3,
  // The probability model has no usable mass or produced non-finite values.
  TTC_STATUS_NUMERICAL = 4,
  // Coincident particles or degenerate geometry.
  TTC_STATUS_GEOMETRY = 5,
  TTC_STATUS_EVALUATOR = 6,
  TTC_STATUS_PARSE = 7,
  TTC_STATUS_IO = 8,
  // The output buffer is too small; the required size was reported.
  TTC_STATUS_BUFFER_TOO_SMALL = 9,
  // A Rust panic was caught at the boundary.
  TTC_STATUS_PANIC = 10,
} TtcStatus;

// Opaque record of one optimization run.
typedef struct TtcRunResult TtcRunResult;

// Opaque tensor-train handle.
typedef struct TtcTensor TtcTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static nul-terminated string.
const char *ttc_version(void);

// Message of the last failed call on this thread, or null if there was
// none. Valid until the next failing call on the same thread.
const char *ttc_last_error_message(void);

// Random tensor with entries uniform in `[0, 1)` and interior ranks
// `min(rank, caps)`.
//
// # Safety
// `mode_sizes` must point to `ndim` values; `out` must be writable.
enum TtcStatus ttc_tensor_random(size_t ndim,
                                 const size_t *mode_sizes,
                                 size_t rank,
                                 uint64_t seed,
                                 struct TtcTensor **out);

// Rank-one tensor equal to one at `index` and zero elsewhere.
//
// # Safety
// `mode_sizes` and `index` must point to `ndim` values; `out` must be
// writable.
enum TtcStatus ttc_tensor_indicator(size_t ndim,
                                    const size_t *mode_sizes,
                                    const size_t *index,
                                    struct TtcTensor **out);

// Parses the structured-text form written by [`ttc_tensor_to_text`].
//
// # Safety
// `text` must be a nul-terminated string; `out` must be writable.
enum TtcStatus ttc_tensor_from_text(const char *text, struct TtcTensor **out);

// Writes the structured-text form into `buf`.
//
// # Safety
// `buf` must hold `len` bytes; `needed` may be null.
enum TtcStatus ttc_tensor_to_text(const struct TtcTensor *t, char *buf, size_t len, size_t *needed);

// # Safety
// `t` must come from this library and not be used afterwards. Null is
// ignored.
void ttc_tensor_free(struct TtcTensor *t);

// # Safety
// `t` must be a live tensor handle; `out` must be writable.
enum TtcStatus ttc_tensor_ndim(const struct TtcTensor *t, size_t *out);

// Copies the mode sizes into `out`, which must hold `ndim` values.
//
// # Safety
// `t` must be a live tensor handle; `out` must hold `len` values.
enum TtcStatus ttc_tensor_mode_sizes(const struct TtcTensor *t, size_t *out, size_t len);

// Tensor element at `index`.
//
// # Safety
// `index` must point to `len` values; `out` must be writable.
enum TtcStatus ttc_tensor_evaluate(const struct TtcTensor *t,
                                   const size_t *index,
                                   size_t len,
                                   double *out);

// Natural log of `p(index)` under `p ∝ t²`; `-inf` where `p` is zero.
//
// # Safety
// `index` must point to `len` values; `out` must be writable.
enum TtcStatus ttc_tensor_log_prob(const struct TtcTensor *t,
                                   const size_t *index,
                                   size_t len,
                                   double *out);

// Draws `count` samples from `p ∝ t²`. Sample `s` occupies
// `out[s * ndim .. (s + 1) * ndim]`.
//
// # Safety
// `out` must hold `len` values.
enum TtcStatus ttc_tensor_sample(const struct TtcTensor *t,
                                 size_t count,
                                 uint64_t seed,
                                 size_t *out,
                                 size_t len);

// Lennard-Jones energy of `n_atoms` particles with coordinates laid out
// as `x0 y0 z0 x1 ...`.
//
// # Safety
// `coords` must hold `3 * n_atoms` values; `out` must be writable.
enum TtcStatus ttc_lj_energy(size_t n_atoms,
                             const double *coords,
                             double epsilon,
                             double sigma,
                             double *out);

// Energy gradient, same layout as `coords`. `energy` may be null.
//
// # Safety
// `coords` and `grad` must hold `3 * n_atoms` values.
enum TtcStatus ttc_lj_gradient(size_t n_atoms,
                               const double *coords,
                               double epsilon,
                               double sigma,
                               double *grad,
                               double *energy);

// Writes the TOML run configuration of a named preset.
//
// # Safety
// `name` must be nul-terminated; `buf` must hold `len` bytes; `needed`
// may be null.
enum TtcStatus ttc_preset_config(const char *name,
                                 size_t atoms,
                                 char *buf,
                                 size_t len,
                                 size_t *needed);

// Runs one global search plus refinement described by a TOML run
// configuration.
//
// # Safety
// `config_toml` must be nul-terminated; `out` must be writable.
enum TtcStatus ttc_run_optimize(const char *config_toml, struct TtcRunResult **out);

// # Safety
// `r` must come from this library and not be used afterwards. Null is
// ignored.
void ttc_run_result_free(struct TtcRunResult *r);

// Refined energy of the run.
//
// # Safety
// `r` must be a live handle; `out` must be writable.
enum TtcStatus ttc_run_result_energy(const struct TtcRunResult *r, double *out);

// Relative error against the reference energy; NaN without one.
//
// # Safety
// `r` must be a live handle; `out` must be writable.
enum TtcStatus ttc_run_result_relative_error(const struct TtcRunResult *r, double *out);

// Global-search evaluations, total and last refinement model calls.
// Any output pointer may be null.
//
// # Safety
// `r` must be a live handle.
enum TtcStatus ttc_run_result_calls(const struct TtcRunResult *r,
                                    uint64_t *pc,
                                    uint64_t *lct,
                                    uint64_t *lcl);

// # Safety
// `r` must be a live handle; `out` must be writable.
enum TtcStatus ttc_run_result_atom_count(const struct TtcRunResult *r, size_t *out);

// Final coordinates as `x0 y0 z0 x1 ...`; `out` must hold three values
// per atom.
//
// # Safety
// `r` must be a live handle; `out` must hold `len` values.
enum TtcStatus ttc_run_result_positions(const struct TtcRunResult *r, double *out, size_t len);

// The full run record as JSON.
//
// # Safety
// `r` must be a live handle; `buf` must hold `len` bytes; `needed` may be
// null.
enum TtcStatus ttc_run_result_json(const struct TtcRunResult *r,
                                   char *buf,
                                   size_t len,
                                   size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TTCLUSTER_H */
