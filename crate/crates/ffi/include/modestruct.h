#ifndef MODESTRUCT_H
#define MODESTRUCT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
enum MsStatus {
  MS_STATUS_OK = 0,
  MS_STATUS_NULL_POINTER = 1,
  // A parameter lies outside the model's domain.
  MS_STATUS_DOMAIN = 2,
  // A documented precondition was violated.
  MS_STATUS_CONTRACT = 3,
  MS_STATUS_PARSE = 4,
  MS_STATUS_IO = 5,
  MS_STATUS_INVALID_UTF8 = 6,
  // The test or quantity is undefined for this input.
  MS_STATUS_UNDEFINED = 7,
  MS_STATUS_PANIC = 8,
};

enum MsModeType {
  MS_MODE_TYPE_THERMAL = 0,
  MS_MODE_TYPE_POISSONIAN = 1,
  MS_MODE_TYPE_SINGLE_PHOTON = 2,
};

enum MsOccupancy {
  MS_OCCUPANCY_CONJUGATED = 0,
  MS_OCCUPANCY_SIGNAL = 1,
  MS_OCCUPANCY_IDLER = 2,
};

// A matrix of event counts.
struct MsCounts;

// A source model.
struct MsModel;

// A joint photon-number distribution.
struct MsProbMatrix;

// The outcome of a reconstruction.
struct MsReconstruction;

// Hillery sums. Sigmas are NaN when not available.
struct MsHillery {
  double even_sum;
  double odd_sum;
  double vacuum;
  double tail_mass;
  double even_sigma;
  double odd_sigma;
};

struct MsPearson {
  double chi2;
  double p_value;
  size_t bins;
  size_t dof;
};

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on this thread.
const char *ms_last_error(void);

// Library version as a static string.
const char *ms_version(void);

// # Safety
// `s` must come from this library or be null.
void ms_string_free(char *s);

// Empty model with photon numbers truncated at `n_max`.
//
// # Safety
// `out` must be a valid pointer.
enum MsStatus ms_model_new(size_t n_max, struct MsModel **out);

// Appends a mode. Transmittances are ignored for single-arm modes.
//
// # Safety
// `model` must be a live handle.
enum MsStatus ms_model_add_mode(struct MsModel *model,
                                enum MsModeType mode_type,
                                enum MsOccupancy occupancy,
                                double mu,
                                double eta_s,
                                double eta_i);

// Parses a model in the JSON model-file format.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum MsStatus ms_model_from_json(const char *json, struct MsModel **out);

// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum MsStatus ms_model_to_json(const struct MsModel *model, char **out);

// Number of modes, or 0 for a null handle.
//
// # Safety
// `model` must be a live handle or null.
size_t ms_model_mode_count(const struct MsModel *model);

// # Safety
// `model` must come from this library or be null.
void ms_model_free(struct MsModel *model);

// Joint photon-number distribution of a model.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum MsStatus ms_full_jpd(const struct MsModel *model, struct MsProbMatrix **out);

// Side length `n_max + 1`, or 0 for a null handle.
//
// # Safety
// `jpd` must be a live handle or null.
size_t ms_prob_matrix_dim(const struct MsProbMatrix *jpd);

// Probability outside the window, or NaN for a null handle.
//
// # Safety
// `jpd` must be a live handle or null.
double ms_prob_matrix_tail_mass(const struct MsProbMatrix *jpd);

// Copies the row-major entries (row = signal photon number) into `buf`,
// which must hold `dim * dim` values.
//
// # Safety
// `buf` must point to `len` writable doubles.
enum MsStatus ms_prob_matrix_copy(const struct MsProbMatrix *jpd, double *buf, size_t len);

// # Safety
// `jpd` must come from this library or be null.
void ms_prob_matrix_free(struct MsProbMatrix *jpd);

// Draws `n_tot` trials from `jpd`; trials outside the window count only
// towards the total.
//
// # Safety
// `jpd` must be a live handle and `out` a valid pointer.
enum MsStatus ms_sample_counts(const struct MsProbMatrix *jpd,
                               uint64_t n_tot,
                               uint64_t seed,
                               struct MsCounts **out);

// Wraps `(n_max + 1)^2` row-major counts taken from `n_tot` trials.
//
// # Safety
// `cells` must point to `len` readable values and `out` be a valid pointer.
enum MsStatus ms_counts_new(size_t n_max,
                            const uint64_t *cells,
                            size_t len,
                            uint64_t n_tot,
                            struct MsCounts **out);

// Side length, or 0 for a null handle.
//
// # Safety
// `counts` must be a live handle or null.
size_t ms_counts_dim(const struct MsCounts *counts);

// Number of trials, or 0 for a null handle.
//
// # Safety
// `counts` must be a live handle or null.
uint64_t ms_counts_n_tot(const struct MsCounts *counts);

// # Safety
// `buf` must point to `len` writable values.
enum MsStatus ms_counts_copy(const struct MsCounts *counts, uint64_t *buf, size_t len);

// # Safety
// `counts` must come from this library or be null.
void ms_counts_free(struct MsCounts *counts);

// Hillery sums of a distribution normalized over its window.
//
// # Safety
// `jpd` must be a live handle and `out` a valid pointer.
enum MsStatus ms_hillery(const struct MsProbMatrix *jpd, struct MsHillery *out);

// Hillery sums of counts with binomial uncertainties.
//
// # Safety
// `counts` must be a live handle and `out` a valid pointer.
enum MsStatus ms_hillery_counts(const struct MsCounts *counts, struct MsHillery *out);

// Pearson test of counts against a model distribution. Returns
// `MS_STATUS_UNDEFINED` when no degrees of freedom remain.
//
// # Safety
// Handles must be live and `out` a valid pointer.
enum MsStatus ms_pearson_pvalue(const struct MsCounts *counts,
                                const struct MsProbMatrix *jpd,
                                size_t n_fit_params,
                                struct MsPearson *out);

// Full reconstruction. `config_json` may be null for the defaults.
//
// # Safety
// `counts` must be a live handle, `config_json` null or a NUL-terminated
// string, and `out` a valid pointer.
enum MsStatus ms_reconstruct(const struct MsCounts *counts,
                             const char *config_json,
                             struct MsReconstruction **out);

// 1 when every stage succeeded, 0 when some failed, -1 for a null handle.
//
// # Safety
// `rec` must be a live handle or null.
int32_t ms_reconstruction_complete(const struct MsReconstruction *rec);

// The reconstructed model as a new handle.
//
// # Safety
// `rec` must be a live handle and `out` a valid pointer.
enum MsStatus ms_reconstruction_model(const struct MsReconstruction *rec, struct MsModel **out);

// The report as JSON.
//
// # Safety
// `rec` must be a live handle and `out` a valid pointer.
enum MsStatus ms_reconstruction_report_json(const struct MsReconstruction *rec, char **out);

// # Safety
// `rec` must come from this library or be null.
void ms_reconstruction_free(struct MsReconstruction *rec);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MODESTRUCT_H */
