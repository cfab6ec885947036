/* C interface to the xsumforge summarization toolkit. */

#ifndef XSUMFORGE_H
#define XSUMFORGE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call in this interface.
 */
typedef enum XsfStatus {
  XSF_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  XSF_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  XSF_STATUS_INVALID_UTF8 = 2,
  /**
   * The artifacts could not be loaded or do not fit together.
   */
  XSF_STATUS_LOAD_FAILED = 3,
  /**
   * The input was rejected (empty document, empty reference).
   */
  XSF_STATUS_BAD_INPUT = 4,
  /**
   * An unexpected internal failure; details via `xsf_last_error`.
   */
  XSF_STATUS_INTERNAL = 5,
} XsfStatus;

/**
 * Opaque handle to a loaded summarizer.
 */
typedef struct XsfSummarizer XsfSummarizer;

/**
 * ROUGE-1/2/L precision, recall, and F1 for one candidate/reference pair.
 */
typedef struct XsfRouge {
  double r1_precision;
  double r1_recall;
  double r1_f1;
  double r2_precision;
  double r2_recall;
  double r2_f1;
  double rl_precision;
  double rl_recall;
  double rl_f1;
} XsfRouge;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on the calling thread, as a
 * NUL-terminated string. The pointer stays valid until the next failing
 * call on the same thread. Never null; empty before any failure.
 */
const char *xsf_last_error(void);

/**
 * Opens a summarizer from a model checkpoint, a vocabulary file, and an
 * optional topic model (pass null for variants that do not use one).
 * `beam` and `max_len` of 0 select the defaults (beam 10, full length).
 * On success writes a handle to `out`; release it with
 * [`xsf_summarizer_close`].
 *
 * # Safety
 * `checkpoint` and `vocab` must be NUL-terminated strings, `topic_model`
 * null or NUL-terminated, and `out` a valid location to store the handle.
 */
enum XsfStatus xsf_summarizer_open(const char *checkpoint,
                                   const char *vocab,
                                   const char *topic_model,
                                   uint32_t beam,
                                   uint32_t max_len,
                                   struct XsfSummarizer **out);

/**
 * Summarizes a UTF-8 document and writes a newly allocated NUL-terminated
 * summary to `out`. Free the summary with [`xsf_string_free`].
 *
 * # Safety
 * `handle` must come from a successful [`xsf_summarizer_open`] and not yet
 * be closed, `document` must be a NUL-terminated string, and `out` a valid
 * location to store the result.
 */
enum XsfStatus xsf_summarize(const struct XsfSummarizer *handle, const char *document, char **out);

/**
 * Scores `candidate` against `reference` with ROUGE-1/2/L after tokenizing
 * both. Fails with `BadInput` when the reference has no tokens.
 *
 * # Safety
 * `candidate` and `reference` must be NUL-terminated strings and `out` a
 * valid location to store the scores.
 */
enum XsfStatus xsf_rouge(const char *candidate, const char *reference, struct XsfRouge *out);

/**
 * Releases a summarizer handle. Null is ignored.
 *
 * # Safety
 * `handle` must be null or come from [`xsf_summarizer_open`], and must not
 * be used after this call.
 */
void xsf_summarizer_close(struct XsfSummarizer *handle);

/**
 * Releases a string produced by this interface. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string returned through an out-parameter of this
 * interface, and must not be used after this call.
 */
void xsf_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XSUMFORGE_H */
