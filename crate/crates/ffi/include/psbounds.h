#ifndef PSBOUNDS_H
#define PSBOUNDS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PsbPolicy {
  PSB_POLICY_GLOBAL = 0,
  PSB_POLICY_STRATUM_EMPIRICAL = 1,
} PsbPolicy;

/**
 * Status codes. The first four match the command-line exit codes.
 */
typedef enum PsbStatus {
  PSB_STATUS_OK = 0,
  PSB_STATUS_INVALID = 1,
  PSB_STATUS_SEPARATION = 2,
  PSB_STATUS_UNSATISFIABLE_STRATA = 3,
  PSB_STATUS_NULL_POINTER = 4,
  PSB_STATUS_INVALID_UTF8 = 5,
  PSB_STATUS_PANIC = 6,
} PsbStatus;

/**
 * A loaded study frame.
 */
typedef struct PsbFrame PsbFrame;

/**
 * The result of [`psb_analyze`].
 */
typedef struct PsbReport PsbReport;

typedef struct PsbInterval {
  double lower;
  double upper;
  double width;
} PsbInterval;

typedef struct PsbAnalysisOptions {
  double range_lo;
  double range_hi;
  size_t k_max;
  size_t min_treated;
  size_t min_control;
  enum PsbPolicy policy;
  bool ridge;
} PsbAnalysisOptions;

typedef struct PsbOverlap {
  double omega;
  double lo;
  double hi;
  size_t inside;
  size_t total;
} PsbOverlap;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *psb_last_error(void);

/**
 * Worst-case bounds from a SATE estimate, sample size `n`, population size
 * `population` and the outcome range.
 *
 * # Safety
 * `out` must point to writable memory for one `PsbInterval`.
 */
enum PsbStatus psb_worst_case_bounds(double sate,
                                     size_t n,
                                     size_t population,
                                     double range_lo,
                                     double range_hi,
                                     struct PsbInterval *out);

/**
 * Loads a CSV study frame with columns `id, z, w, y` and covariates.
 * `covariates` is a comma-separated column list, or null for every other
 * column.
 *
 * # Safety
 * `path` and a non-null `covariates` must be nul-terminated strings; `out`
 * must be writable. On success `*out` owns a frame to release with
 * [`psb_frame_free`].
 */
enum PsbStatus psb_frame_load_csv(const char *path, const char *covariates, struct PsbFrame **out);

/**
 * Population size `N`, or 0 for a null frame.
 *
 * # Safety
 * `frame` must be null or a live handle from [`psb_frame_load_csv`].
 */
size_t psb_frame_population_size(const struct PsbFrame *frame);

/**
 * Sample size `n`, or 0 for a null frame.
 *
 * # Safety
 * `frame` must be null or a live handle from [`psb_frame_load_csv`].
 */
size_t psb_frame_sample_size(const struct PsbFrame *frame);

/**
 * # Safety
 * `frame` must be null or a handle from [`psb_frame_load_csv`] not yet freed.
 */
void psb_frame_free(struct PsbFrame *frame);

/**
 * Options matching the command-line defaults for the given range.
 */
struct PsbAnalysisOptions psb_analysis_options_default(double range_lo, double range_hi);

/**
 * Fits the propensity model and computes unstratified and stratified
 * bounds.
 *
 * # Safety
 * `frame` must be a live handle, `options` readable and `out` writable. On
 * success `*out` owns a report to release with [`psb_report_free`].
 */
enum PsbStatus psb_analyze(const struct PsbFrame *frame,
                           const struct PsbAnalysisOptions *options,
                           struct PsbReport **out);

/**
 * Copies the unstratified and stratified intervals out of a report.
 * Either destination may be null.
 *
 * # Safety
 * `report` must be a live handle; non-null destinations must be writable.
 */
enum PsbStatus psb_report_bounds(const struct PsbReport *report,
                                 struct PsbInterval *unstratified,
                                 struct PsbInterval *stratified);

/**
 * Precision gain, or NaN for a null report.
 *
 * # Safety
 * `report` must be null or a live handle.
 */
double psb_report_precision_gain(const struct PsbReport *report);

/**
 * Number of strata used, or 0 for a null report.
 *
 * # Safety
 * `report` must be null or a live handle.
 */
size_t psb_report_strata(const struct PsbReport *report);

/**
 * # Safety
 * `report` must be a live handle and `out` writable.
 */
enum PsbStatus psb_report_overlap(const struct PsbReport *report, struct PsbOverlap *out);

/**
 * The full report as JSON, or null for a null report. Release with
 * [`psb_string_free`].
 *
 * # Safety
 * `report` must be null or a live handle.
 */
char *psb_report_to_json(const struct PsbReport *report);

/**
 * # Safety
 * `report` must be null or a handle from [`psb_analyze`] not yet freed.
 */
void psb_report_free(struct PsbReport *report);

/**
 * Overlap of sample and population propensity scores for a frame.
 *
 * # Safety
 * `frame` must be a live handle and `out` writable.
 */
enum PsbStatus psb_overlap(const struct PsbFrame *frame, bool ridge, struct PsbOverlap *out);

/**
 * # Safety
 * `s` must be null or a string returned by this library not yet freed.
 */
void psb_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PSBOUNDS_H */
