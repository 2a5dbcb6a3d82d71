#ifndef FACTCAL_H
#define FACTCAL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  FACTCAL_METHOD_GEN_BINARY = 0,
  FACTCAL_METHOD_GEN_MULTI = 1,
  FACTCAL_METHOD_DIS_SINGLE = 2,
  FACTCAL_METHOD_DIS_CONTEXT = 3,
  FACTCAL_METHOD_DIS_RATING = 4,
} FactcalMethod;

typedef enum {
  FACTCAL_STATUS_OK = 0,
  FACTCAL_STATUS_NULL_POINTER = 1,
  FACTCAL_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The quantity is not defined for this input (single-class AUROC,
   * constant Spearman input, no truth token, no rating).
   */
  FACTCAL_STATUS_UNDEFINED = 3,
  FACTCAL_STATUS_IO = 4,
  FACTCAL_STATUS_CASSETTE_MISS = 5,
  FACTCAL_STATUS_INTERNAL = 6,
} FactcalStatus;

typedef enum {
  FACTCAL_STRATEGY_WAVG = 0,
  FACTCAL_STRATEGY_ADJUSTED_ALPHA = 1,
  FACTCAL_STRATEGY_DAMPED_FUSION = 2,
  FACTCAL_STRATEGY_MIN_CONF = 3,
  FACTCAL_STRATEGY_HMEAN = 4,
  FACTCAL_STRATEGY_PROD_CONF = 5,
} FactcalStrategy;

/**
 * A cassette loaded into memory.
 */
typedef struct FactcalCassette FactcalCassette;

/**
 * Growable list of (confidence, label) pairs.
 */
typedef struct FactcalPairs FactcalPairs;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next factcal call on the same thread.
 */
const char *factcal_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *factcal_version(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void factcal_string_free(char *s);

FactcalPairs *factcal_pairs_new(void);

/**
 * # Safety
 * `pairs` must come from [`factcal_pairs_new`] and not have been freed.
 */
void factcal_pairs_free(FactcalPairs *pairs);

/**
 * Appends one pair. Confidence and label must lie in [0, 1].
 *
 * # Safety
 * `pairs` must be a live handle.
 */
FactcalStatus factcal_pairs_push(FactcalPairs *pairs, double confidence, double label);

/**
 * Number of pairs, 0 for NULL.
 *
 * # Safety
 * `pairs` must be NULL or a live handle.
 */
size_t factcal_pairs_len(const FactcalPairs *pairs);

/**
 * Expected calibration error with `bins` equal-width bins.
 *
 * # Safety
 * `pairs` must be a live handle and `result` writable.
 */
FactcalStatus factcal_pairs_ece(const FactcalPairs *pairs, size_t bins, double *result);

/**
 * # Safety
 * `pairs` must be a live handle and `result` writable.
 */
FactcalStatus factcal_pairs_brier(const FactcalPairs *pairs, double *result);

/**
 * Needs binary labels with both classes present; otherwise `Undefined` or
 * `InvalidArgument`.
 *
 * # Safety
 * `pairs` must be a live handle and `result` writable.
 */
FactcalStatus factcal_pairs_auroc(const FactcalPairs *pairs, double *result);

/**
 * Spearman correlation between the confidences and labels of the list.
 *
 * # Safety
 * `pairs` must be a live handle and `result` writable.
 */
FactcalStatus factcal_pairs_spearman(const FactcalPairs *pairs, double *result);

/**
 * Spearman correlation of two arrays of length `n`.
 *
 * # Safety
 * `x` and `y` must point to `n` readable values and `result` be writable.
 */
FactcalStatus factcal_spearman(const double *x, const double *y, size_t n, double *result);

/**
 * Fuses two confidences `a` (generative) and `b` (discriminative).
 *
 * # Safety
 * `result` must be writable.
 */
FactcalStatus factcal_fuse(double a,
                           double b,
                           FactcalStrategy strategy,
                           double alpha,
                           double gamma_a,
                           double k,
                           double *result);

/**
 * `supported / total`.
 *
 * # Safety
 * `result` must be writable.
 */
FactcalStatus factcal_gen_binary(uint32_t supported, uint32_t total, double *result);

/**
 * `supported / (supported + conflicting)`, or `fallback` when both are 0.
 *
 * # Safety
 * `result` must be writable.
 */
FactcalStatus factcal_gen_multi(uint32_t supported,
                                uint32_t conflicting,
                                double fallback,
                                double *result);

/**
 * P(true) from `n` first-token alternatives. With `raw` false the mass on
 * "true" is normalized by the mass on "true" and "false". `Undefined` when
 * neither token is present.
 *
 * # Safety
 * `tokens` must hold `n` NUL-terminated strings and `probabilities` `n`
 * values; `result` must be writable.
 */
FactcalStatus factcal_extract_p_true(const char *const *tokens,
                                     const double *probabilities,
                                     size_t n,
                                     bool raw,
                                     double *result);

/**
 * Parses a `$n$` rating. Writes the 0-10 value and whether the model's
 * number had to be clamped. `Undefined` when no rating is found.
 *
 * # Safety
 * `response` must be a NUL-terminated string; out-pointers must be writable.
 */
FactcalStatus factcal_parse_rating(const char *response, uint8_t *value, bool *clamped);

/**
 * Renders the elicitation prompt for one claim. `context` is used by
 * Dis-Context and Dis-Rating, `sample` by the generative methods; unused
 * arguments may be NULL. The result is freed with [`factcal_string_free`].
 *
 * # Safety
 * String arguments must be NULL or NUL-terminated; `result` writable.
 */
FactcalStatus factcal_render_prompt(FactcalMethod method,
                                    const char *claim,
                                    const char *context,
                                    const char *sample,
                                    char **result);

/**
 * Request fingerprint as used for cassette keys (64 hex characters).
 *
 * # Safety
 * `model` and `prompt` must be NUL-terminated; `result` writable.
 */
FactcalStatus factcal_fingerprint(const char *model,
                                  const char *prompt,
                                  double temperature,
                                  double top_p,
                                  uint32_t max_tokens,
                                  uint32_t logprobs_top_k,
                                  uint32_t sample_index,
                                  char **result);

/**
 * Loads a cassette file.
 *
 * # Safety
 * `path` must be NUL-terminated; `result` writable.
 */
FactcalStatus factcal_cassette_open(const char *path, FactcalCassette **result);

/**
 * # Safety
 * `cassette` must be NULL or a live handle.
 */
size_t factcal_cassette_len(const FactcalCassette *cassette);

/**
 * Completion text recorded under `fingerprint`, or `CassetteMiss`. The
 * result is freed with [`factcal_string_free`].
 *
 * # Safety
 * `cassette` must be a live handle, `fingerprint` NUL-terminated and
 * `result` writable.
 */
FactcalStatus factcal_cassette_lookup(const FactcalCassette *cassette,
                                      const char *fingerprint,
                                      char **result);

/**
 * # Safety
 * `cassette` must come from [`factcal_cassette_open`] and not have been
 * freed.
 */
void factcal_cassette_free(FactcalCassette *cassette);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FACTCAL_H */
