#ifndef AMPSBL_H
#define AMPSBL_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum {
  AMPSBL_STATUS_OK = 0,
  AMPSBL_STATUS_NULL_POINTER = 1,
  AMPSBL_STATUS_INVALID_ARGUMENT = 2,
  AMPSBL_STATUS_INVALID_CONFIG = 3,
  AMPSBL_STATUS_DIMENSION = 4,
  /**
   * The estimator diverged; classic AMP-SBL does this routinely.
   */
  AMPSBL_STATUS_DIVERGENCE = 5,
  /**
   * Singular or indefinite linear algebra.
   */
  AMPSBL_STATUS_NUMERICAL = 6,
  AMPSBL_STATUS_IO = 7,
  AMPSBL_STATUS_FORMAT = 8,
  AMPSBL_STATUS_CONFIG_MISMATCH = 9,
  AMPSBL_STATUS_PANIC = 10,
} AmpsblStatus;

typedef enum {
  /**
   * The full-size system.
   */
  AMPSBL_PRESET_PAPER = 0,
  /**
   * N = 16, K = 8, Q = 2, N_RF = 2, 16 x 16 grid.
   */
  AMPSBL_PRESET_DESK = 1,
} AmpsblPreset;

typedef enum {
  AMPSBL_ALGO_SBL = 0,
  AMPSBL_ALGO_AMP_SBL = 1,
  AMPSBL_ALGO_SBL_UNFOLDING = 2,
  AMPSBL_ALGO_AMP_SBL_UNFOLDING = 3,
} AmpsblAlgo;

/**
 * Opaque configuration.
 */
typedef struct AmpsblConfig AmpsblConfig;

/**
 * Opaque learned M-step network.
 */
typedef struct AmpsblNet AmpsblNet;

/**
 * Opaque system: dictionaries, combiner and measurement operator.
 */
typedef struct AmpsblSystem AmpsblSystem;

/**
 * System dimensions.
 */
typedef struct {
  size_t n_antennas;
  size_t n_subcarriers;
  /**
   * Length of an observation vector, K Q N_RF.
   */
  size_t n_measurements;
  /**
   * G_A G_D.
   */
  size_t grid_size;
} AmpsblDims;

typedef struct {
  double re;
  double im;
} AmpsblComplex;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t ampsbl_last_error(char *buf, size_t len);

/**
 * Creates a configuration from a preset.
 *
 * # Safety
 * `out` must point to writable storage for a handle.
 */
AmpsblStatus ampsbl_config_new(AmpsblPreset preset, AmpsblConfig **out);

/**
 * Reads a `key = value` configuration file layered over the paper preset.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
AmpsblStatus ampsbl_config_load(const char *path, AmpsblConfig **out);

/**
 * Sets one configuration key, e.g. `("snr_db", "20")`. The configuration is
 * validated when a system is built from it.
 *
 * # Safety
 * `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
 */
AmpsblStatus ampsbl_config_set(AmpsblConfig *cfg, const char *key, const char *value);

/**
 * Writes the 16-hex-digit configuration hash plus a NUL; `len` must be >= 17.
 *
 * # Safety
 * `cfg` must be a live handle; `buf` must point to `len` writable bytes.
 */
AmpsblStatus ampsbl_config_hash(const AmpsblConfig *cfg, char *buf, size_t len);

/**
 * # Safety
 * `cfg` must be null or a handle from this library, freed at most once.
 */
void ampsbl_config_free(AmpsblConfig *cfg);

/**
 * Per-iteration FLOPs of a named algorithm (`sbl`, `amp-sbl-unfolding`, ...).
 *
 * # Safety
 * `cfg` must be a live handle, `algo` a NUL-terminated string, `out` writable.
 */
AmpsblStatus ampsbl_flops_per_iteration(const AmpsblConfig *cfg, const char *algo, uint64_t *out);

/**
 * Builds dictionaries, combiner and measurement operator. This is the
 * expensive step (an SVD of the operator).
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be writable.
 */
AmpsblStatus ampsbl_system_new(const AmpsblConfig *cfg, AmpsblSystem **out);

/**
 * # Safety
 * `sys` must be null or a handle from this library, freed at most once.
 */
void ampsbl_system_free(AmpsblSystem *sys);

/**
 * # Safety
 * `sys` must be a live handle; `out` must be writable.
 */
AmpsblStatus ampsbl_system_dims(const AmpsblSystem *sys, AmpsblDims *out);

/**
 * Channel `index` of the test split under the system's seed, N x K
 * column-major into `h_out` (`h_len` = N K).
 *
 * # Safety
 * `sys` must be a live handle; `h_out` must point to `h_len` elements.
 */
AmpsblStatus ampsbl_channel_draw(const AmpsblSystem *sys,
                                 uint64_t index,
                                 AmpsblComplex *h_out,
                                 size_t h_len);

/**
 * Pilot observation of channel `h` (N x K, column-major) with noise drawn
 * from the evaluation stream `noise_index`. Writes the whitened `y`.
 *
 * # Safety
 * `sys` must be a live handle; the arrays must have the stated lengths.
 */
AmpsblStatus ampsbl_observe(const AmpsblSystem *sys,
                            const AmpsblComplex *h,
                            size_t h_len,
                            uint64_t noise_index,
                            AmpsblComplex *y_out,
                            size_t y_len);

/**
 * Loads a trained network; the checkpoint must match `cfg`'s physical system.
 *
 * # Safety
 * `cfg` must be a live handle, `path` NUL-terminated, `out` writable.
 */
AmpsblStatus ampsbl_net_load(const AmpsblConfig *cfg, const char *path, AmpsblNet **out);

/**
 * Depth L of the unfolded estimator the network drives (layers + 1).
 *
 * # Safety
 * `net` must be a live handle; `out` writable.
 */
AmpsblStatus ampsbl_net_depth(const AmpsblNet *net, size_t *out);

/**
 * # Safety
 * `net` must be null or a handle from this library, freed at most once.
 */
void ampsbl_net_free(AmpsblNet *net);

/**
 * Estimates the channel from a whitened observation `y` and writes it N x K
 * column-major to `h_out`. Classic algorithms run `iterations` rounds;
 * unfolded ones need `net` and take their depth from it (`iterations` is
 * ignored). On divergence the status is `Divergence` and, if
 * `diverged_at` is non-null, the failing iteration is stored there.
 *
 * # Safety
 * `sys` must be a live handle, `net` null or live, arrays of the stated lengths.
 */
AmpsblStatus ampsbl_estimate(const AmpsblSystem *sys,
                             AmpsblAlgo algo,
                             size_t iterations,
                             const AmpsblNet *net,
                             const AmpsblComplex *y,
                             size_t y_len,
                             AmpsblComplex *h_out,
                             size_t h_len,
                             size_t *diverged_at);

/**
 * `||h - h_hat||^2 / ||h||^2` over two arrays of equal length.
 *
 * # Safety
 * `h` and `h_hat` must point to `len` elements; `out` writable.
 */
AmpsblStatus ampsbl_nmse(const AmpsblComplex *h,
                         const AmpsblComplex *h_hat,
                         size_t len,
                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AMPSBL_H */
