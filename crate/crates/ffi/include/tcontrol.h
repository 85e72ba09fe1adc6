#ifndef TCONTROL_H
#define TCONTROL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TcStatus {
  TC_STATUS_OK = 0,
  TC_STATUS_NULL_POINTER = 1,
  TC_STATUS_INVALID_ARGUMENT = 2,
  TC_STATUS_NOT_FOUND = 3,
  TC_STATUS_BANK_ERROR = 4,
  TC_STATUS_SCALE_ERROR = 5,
  TC_STATUS_ESTIMATOR_ERROR = 6,
  TC_STATUS_PANIC = 99,
} TcStatus;

typedef enum TcRole {
  TC_ROLE_STUDENT = 0,
  TC_ROLE_AGENT = 1,
} TcRole;

typedef enum TcMethod {
  // Saturated OLS with homoskedastic standard errors.
  TC_METHOD_OLS = 0,
  // Saturated OLS with HC1 standard errors.
  TC_METHOD_OLS_HC1 = 1,
  TC_METHOD_MEAN_DIFF = 2,
} TcMethod;

typedef struct TcBank TcBank;

typedef struct TcEstimate TcEstimate;

// Accumulates baseline-differenced observations.
typedef struct TcPanel TcPanel;

typedef struct TcConcordance {
  double slope;
  double intercept;
  double max_abs_residual;
  size_t points;
} TcConcordance;

// One year of an estimate. `has_se` is 0 when the method gives no standard
// error, in which case `se`, `ci_lo` and `ci_hi` are NaN.
typedef struct TcYearEstimate {
  uint16_t year;
  double beta;
  double gamma;
  int32_t has_se;
  double se;
  double ci_lo;
  double ci_hi;
  size_t n_student;
  size_t n_agent;
} TcYearEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. The pointer stays
// valid until the next failing call on the same thread.
const char *tc_last_error(void);

// Loads a question bank CSV.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum TcStatus tc_bank_load(const char *path, struct TcBank **out);

// # Safety
// `bank` must come from [`tc_bank_load`] and not be used afterwards.
void tc_bank_free(struct TcBank *bank);

// Total number of questions in the bank.
//
// # Safety
// `bank` must be a live handle and `out` a valid pointer.
enum TcStatus tc_bank_len(const struct TcBank *bank, size_t *out);

// Number of questions available for `year`.
//
// # Safety
// `bank` must be a live handle and `out` a valid pointer.
enum TcStatus tc_bank_year_len(const struct TcBank *bank, uint16_t year, size_t *out);

// Parses `response` as an answer to `question_id` and writes 1 to `correct`
// if it is acceptable, else 0.
//
// # Safety
// `bank` must be a live handle, the strings NUL-terminated, `correct` valid.
enum TcStatus tc_bank_grade(const struct TcBank *bank,
                            const char *question_id,
                            const char *response,
                            int32_t *correct);

// Fits the pre-to-post concordance line through `n` score pairs.
//
// # Safety
// `old_scaled` and `new_scaled` must each point to `n` doubles.
enum TcStatus tc_concordance_fit(const double *old_scaled,
                                 const double *new_scaled,
                                 size_t n,
                                 struct TcConcordance *out);

// Maps a pre-era scaled score onto the post-era scale.
//
// # Safety
// `concordance` and `out` must be valid pointers.
enum TcStatus tc_concordance_map(const struct TcConcordance *concordance,
                                 double scaled_pre,
                                 double *out);

struct TcPanel *tc_panel_new(void);

// # Safety
// `panel` must come from [`tc_panel_new`] and not be used afterwards.
void tc_panel_free(struct TcPanel *panel);

// Adds one observation: the change in `unit_id`'s score between the baseline
// year and `year`.
//
// # Safety
// `panel` must be a live handle and `unit_id` NUL-terminated.
enum TcStatus tc_panel_add(struct TcPanel *panel,
                           const char *unit_id,
                           enum TcRole role,
                           uint16_t year,
                           double delta);

// Number of observations added so far.
//
// # Safety
// `panel` must be a live handle and `out` a valid pointer.
enum TcStatus tc_panel_len(const struct TcPanel *panel, size_t *out);

// Estimates the per-year ADS from the panel.
//
// # Safety
// `panel` must be a live handle and `out` a valid pointer. The result must be
// released with [`tc_estimate_free`].
enum TcStatus tc_panel_estimate(const struct TcPanel *panel,
                                enum TcMethod method,
                                struct TcEstimate **out);

// # Safety
// `estimate` must come from [`tc_panel_estimate`] and not be used afterwards.
void tc_estimate_free(struct TcEstimate *estimate);

// Number of estimated years.
//
// # Safety
// `estimate` must be a live handle and `out` a valid pointer.
enum TcStatus tc_estimate_len(const struct TcEstimate *estimate, size_t *out);

// Copies year `index` (in ascending year order) into `out`.
//
// # Safety
// `estimate` must be a live handle and `out` a valid pointer.
enum TcStatus tc_estimate_year(const struct TcEstimate *estimate,
                               size_t index,
                               struct TcYearEstimate *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TCONTROL_H */
