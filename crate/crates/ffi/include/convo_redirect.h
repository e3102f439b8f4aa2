#ifndef CONVO_REDIRECT_H
#define CONVO_REDIRECT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CrStatus {
  CR_STATUS_OK = 0,
  CR_STATUS_NULL_POINTER = 1,
  CR_STATUS_INVALID_UTF8 = 2,
  CR_STATUS_INVALID_ARGUMENT = 3,
  CR_STATUS_IO = 4,
  CR_STATUS_MODEL = 5,
  CR_STATUS_STATS = 6,
  CR_STATUS_PANIC = 7,
} CrStatus;

typedef enum CrRole {
  CR_ROLE_A = 0,
  CR_ROLE_B = 1,
} CrRole;

typedef enum CrAlternative {
  CR_ALTERNATIVE_TWO_SIDED = 0,
  CR_ALTERNATIVE_GREATER = 1,
  CR_ALTERNATIVE_LESS = 2,
} CrAlternative;

// Opaque n-gram model.
typedef struct CrNgramModel CrNgramModel;

typedef struct CrWindowScore {
  // Reply likelihood given the focal utterance.
  double p;
  // Reply likelihood given the earlier utterance it would otherwise follow.
  double q;
  double redirection;
} CrWindowScore;

typedef struct CrTestResult {
  double statistic;
  double p_value;
  // 1 when the p-value comes from the exact null distribution.
  uint8_t exact;
  size_t n;
} CrTestResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL. The pointer
// stays valid until the next call into this library on the same thread.
const char *cr_last_error_message(void);

// Library version as a static string.
const char *cr_version(void);

// Loads a model written by `cr_ngram_save` or the `train-lm` command.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CrStatus cr_ngram_load(const char *path, struct CrNgramModel **out);

// Trains a model on every session of a corpus. `mapping` may be NULL for
// corpora already in the canonical field layout.
//
// # Safety
// String arguments must be NUL-terminated or NULL where allowed; `out`
// must be writable.
enum CrStatus cr_ngram_train(const char *corpus,
                             const char *mapping,
                             size_t order,
                             double discount,
                             struct CrNgramModel **out);

// # Safety
// `model` must be a live handle; `path` NUL-terminated.
enum CrStatus cr_ngram_save(const struct CrNgramModel *model, const char *path);

// Releases a model. NULL is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void cr_ngram_free(struct CrNgramModel *model);

// Vocabulary size including reserved symbols.
//
// # Safety
// `model` must be a live handle; `out` writable.
enum CrStatus cr_ngram_vocab_size(const struct CrNgramModel *model, size_t *out);

// Redirection of `focal` over the window
// `(prev_other, prev_self, focal, reply)`. `focal_role` is the speaker
// of `focal` and `prev_other`; the other two belong to the other role.
//
// # Safety
// `model` must be a live handle, strings NUL-terminated, `out` writable.
enum CrStatus cr_score_window(const struct CrNgramModel *model,
                              const char *prev_other,
                              const char *prev_self,
                              const char *focal,
                              const char *reply,
                              enum CrRole focal_role,
                              struct CrWindowScore *out);

// Softmax of the two role averages.
//
// # Safety
// `out_t` and `out_c` must be writable.
enum CrStatus cr_relative_redirection(double t_avg, double c_avg, double *out_t, double *out_c);

// Paired signed-rank test on `x[i] - y[i]`.
//
// # Safety
// `x` and `y` must point to `n` doubles each; `out` writable.
enum CrStatus cr_wilcoxon(const double *x,
                          const double *y,
                          size_t n,
                          enum CrAlternative alternative,
                          struct CrTestResult *out);

// Rank-sum test of `x` against `y`.
//
// # Safety
// `x` must point to `nx` doubles and `y` to `ny`; `out` writable.
enum CrStatus cr_mann_whitney(const double *x,
                              size_t nx,
                              const double *y,
                              size_t ny,
                              enum CrAlternative alternative,
                              struct CrTestResult *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONVO_REDIRECT_H */
