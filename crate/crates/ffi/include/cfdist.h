#ifndef CFDIST_H
#define CFDIST_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum CfdStatus {
  CFD_STATUS_OK = 0,
  CFD_STATUS_NULL_POINTER = 1,
  CFD_STATUS_INVALID_ARGUMENT = 2,
  CFD_STATUS_DATA_ERROR = 3,
  CFD_STATUS_NUMERIC_FAILURE = 4,
  CFD_STATUS_IO = 5,
  CFD_STATUS_PANIC = 6,
} CfdStatus;

/**
 * Opaque run configuration.
 */
typedef struct CfdConfig CfdConfig;

/**
 * Opaque validated dataset.
 */
typedef struct CfdDataset CfdDataset;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or null. Valid until the next failing
 * call on the same thread.
 */
const char *cfd_last_error(void);

/**
 * Library version as a static string.
 */
const char *cfd_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void cfd_string_free(char *s);

/**
 * Builds a dataset from column arrays of length `n`. `x` is row-major
 * `n * x_dim` and may be null when `x_dim == 0`; `s` may be null.
 *
 * # Safety
 * Non-null pointers must reference arrays of the stated lengths; `out`
 * must be writable.
 */
enum CfdStatus cfd_dataset_new(const double *y,
                               const double *a,
                               uintptr_t n,
                               const double *x,
                               uintptr_t x_dim,
                               const double *s,
                               struct CfdDataset **out);

/**
 * Loads a dataset from a CSV file with columns `y`, `a` and `x1..xd`
 * and/or `s`.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum CfdStatus cfd_dataset_load_csv(const char *path, struct CfdDataset **out);

/**
 * Number of rows, or 0 for null.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
uintptr_t cfd_dataset_len(const struct CfdDataset *ds);

/**
 * # Safety
 * `ds` must be null or a handle from this library, not yet freed.
 */
void cfd_dataset_free(struct CfdDataset *ds);

/**
 * Default configuration.
 *
 * # Safety
 * `out` must be writable.
 */
enum CfdStatus cfd_config_default(struct CfdConfig **out);

/**
 * Configuration from a JSON document; absent keys take their defaults.
 *
 * # Safety
 * `json` must be a nul-terminated string; `out` must be writable.
 */
enum CfdStatus cfd_config_from_json(const char *json, struct CfdConfig **out);

/**
 * The configuration as JSON, written to `*out`.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be writable.
 */
enum CfdStatus cfd_config_to_json(const struct CfdConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must be null or a handle from this library, not yet freed.
 */
void cfd_config_free(struct CfdConfig *cfg);

/**
 * Pointwise Fréchet–Hoeffding bounds of two CDF values in [0, 1].
 *
 * # Safety
 * `lower` and `upper` must be writable.
 */
enum CfdStatus cfd_fh_pointwise(double u1, double u0, double *lower, double *upper);

/**
 * Smooth minimum `-(1/t) ln(exp(-t u) + exp(-t v))`.
 *
 * # Safety
 * `out` must be writable.
 */
enum CfdStatus cfd_logsumexp_min(double u, double v, double t, double *out);

/**
 * Cross-fitted bound estimates at `n_pairs` threshold pairs (or the default
 * 3 x 3 quantile grid when `n_pairs == 0`), as a JSON array written to
 * `*out`. Uses the configuration's bound folds, smoothing, clipping and
 * estimator flags.
 *
 * # Safety
 * Handles must be live; `y1`/`y0` must hold `n_pairs` values; `out` must
 * be writable.
 */
enum CfdStatus cfd_estimate_bounds(const struct CfdDataset *ds,
                                   const struct CfdConfig *cfg,
                                   const double *y1,
                                   const double *y0,
                                   uintptr_t n_pairs,
                                   uint64_t seed,
                                   char **out);

/**
 * Triple cross-fitted means and ATE for a binary treatment with an
 * instrument column, as a JSON array written to `*out`.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum CfdStatus cfd_tml_binary(const struct CfdDataset *ds,
                              const struct CfdConfig *cfg,
                              uint64_t seed,
                              char **out);

/**
 * Dose-response curve for a continuous treatment with an instrument column,
 * as a JSON array written to `*out`. Doses come from the configuration's
 * grid, or the default 25-point grid when it is empty.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum CfdStatus cfd_tml_continuous(const struct CfdDataset *ds,
                                  const struct CfdConfig *cfg,
                                  uint64_t seed,
                                  char **out);

/**
 * Just-identified IV slope of `y` on `a` with instrument `s`.
 *
 * # Safety
 * `ds` must be live; `beta` and `se` must be writable.
 */
enum CfdStatus cfd_twosls(const struct CfdDataset *ds, double *beta, double *se);

/**
 * Biased HSIC between two scalar samples with median-heuristic RBF
 * bandwidths.
 *
 * # Safety
 * `x` and `y` must hold `n` values; `out` must be writable.
 */
enum CfdStatus cfd_hsic(const double *x, const double *y, uintptr_t n, double *out);

/**
 * HSIC permutation test; writes the statistic and p-value.
 *
 * # Safety
 * `x` and `y` must hold `n` values; `stat` and `p_value` must be writable.
 */
enum CfdStatus cfd_hsic_test(const double *x,
                             const double *y,
                             uintptr_t n,
                             uintptr_t n_perm,
                             uint64_t seed,
                             double *stat,
                             double *p_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CFDIST_H */
