#ifndef SEQDISTILL_H
#define SEQDISTILL_H

/* Generated by cbindgen from crates/ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SdRejectReason {
  SD_REJECT_REASON_NONE = 0,
  SD_REJECT_REASON_TOO_LONG = 1,
  SD_REJECT_REASON_FUNCTION_CALL = 2,
  SD_REJECT_REASON_MISSING_THINK = 3,
  SD_REJECT_REASON_MISSING_ANSWER = 4,
  SD_REJECT_REASON_REPETITION_NGRAM = 5,
  SD_REJECT_REASON_REPETITION_PARAGRAPH = 6,
  SD_REJECT_REASON_MALFORMED_MARKUP = 7,
  SD_REJECT_REASON_ERROR = 8,
} SdRejectReason;

typedef enum SdSentenceType {
  SD_SENTENCE_TYPE_TEACHER = 0,
  SD_SENTENCE_TYPE_STUDENT = 1,
  SD_SENTENCE_TYPE_SHARED = 2,
  SD_SENTENCE_TYPE_BOOSTED = 3,
} SdSentenceType;

typedef enum SdStatus {
  SD_STATUS_OK = 0,
  SD_STATUS_NULL_POINTER = 1,
  SD_STATUS_INVALID_UTF8 = 2,
  SD_STATUS_INVALID_ARGUMENT = 3,
  /**
   * The input was evaluated and rejected; see the reason output.
   */
  SD_STATUS_REJECTED = 4,
  SD_STATUS_PANIC = 5,
} SdStatus;

/**
 * Sentence segmenter configuration.
 */
typedef struct SdSegmenter SdSegmenter;

/**
 * Sentence spans produced by [`sd_segment`].
 */
typedef struct SdSpans SdSpans;

/**
 * Toy autoregressive model over a finite vocabulary.
 */
typedef struct SdToyLm SdToyLm;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null.
 *
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *sd_last_error(void);

/**
 * Creates a segmenter. `punctuation` may be null for the default set.
 *
 * # Safety
 * `punctuation` must be null or a NUL-terminated string; `out` must be writable.
 */
enum SdStatus sd_segmenter_new(uintptr_t min_chars,
                               const char *punctuation,
                               struct SdSegmenter **out_segmenter);

/**
 * # Safety
 * `segmenter` must be null or come from [`sd_segmenter_new`], and is not used afterwards.
 */
void sd_segmenter_free(struct SdSegmenter *segmenter);

/**
 * Splits `text` into sentence spans that partition it.
 *
 * # Safety
 * Pointers must be valid; `text` is NUL-terminated.
 */
enum SdStatus sd_segment(const struct SdSegmenter *segmenter,
                         const char *text,
                         struct SdSpans **out_spans);

/**
 * Number of spans; 0 for null.
 *
 * # Safety
 * `spans` must be null or come from [`sd_segment`].
 */
uintptr_t sd_spans_len(const struct SdSpans *spans);

/**
 * Character range `[start, end)` of span `index`.
 *
 * # Safety
 * `spans` must come from [`sd_segment`]; the outputs must be writable.
 */
enum SdStatus sd_spans_get(const struct SdSpans *spans,
                           uintptr_t index,
                           uintptr_t *out_start,
                           uintptr_t *out_end);

/**
 * # Safety
 * `spans` must be null or come from [`sd_segment`], and is not used afterwards.
 */
void sd_spans_free(struct SdSpans *spans);

/**
 * Source type of one sentence. Fails with `InvalidArgument` when
 * `has_distilled` is false, since the boosted rule needs the distilled logprob.
 *
 * # Safety
 * `out_type` must be writable.
 */
enum SdStatus sd_classify_sentence(double mean_lp_teacher,
                                   double mean_lp_student,
                                   double mean_lp_distilled,
                                   bool has_distilled,
                                   double tau,
                                   enum SdSentenceType *out_type);

/**
 * Token-weighted fraction of sentences whose teacher gap reaches `tau`.
 *
 * # Safety
 * The three arrays must each hold `len` elements; `out_score` must be writable.
 */
enum SdStatus sd_das_score(const double *teacher_lps,
                           const double *student_lps,
                           const uintptr_t *token_counts,
                           uintptr_t len,
                           double tau,
                           double *out_score);

/**
 * Repetition gate. `out_reason` is `None` when the text is kept, otherwise
 * the first reason (n-gram before paragraph).
 *
 * # Safety
 * `text` is NUL-terminated; `out_reason` must be writable.
 */
enum SdStatus sd_repetition_check(const char *text,
                                  uintptr_t ngram_len,
                                  uintptr_t min_repeats,
                                  uintptr_t paragraph_repeats,
                                  enum SdRejectReason *out_reason);

/**
 * Rewrites channel-delimited markup to the `<think>` layout with the default markers.
 *
 * On success `out_text` receives a new string (free with [`sd_string_free`])
 * and `out_reason` is `None`. A rejected text returns [`SdStatus::Rejected`],
 * sets `out_reason` and leaves `out_text` null; the diagnostic is in
 * [`sd_last_error`].
 *
 * # Safety
 * `text` is NUL-terminated; both outputs must be writable.
 */
enum SdStatus sd_structure_normalize(const char *text,
                                     char **out_text,
                                     enum SdRejectReason *out_reason);

/**
 * # Safety
 * `s` must be null or a string returned by this library, and is not used afterwards.
 */
void sd_string_free(char *s);

/**
 * Parses a toy model from its line-record text.
 *
 * # Safety
 * `text` is NUL-terminated; `out_lm` must be writable.
 */
enum SdStatus sd_toylm_parse(const char *text, struct SdToyLm **out_lm);

/**
 * Model that ends immediately with probability `p_eot`, otherwise emits one symbol first.
 *
 * # Safety
 * `out_lm` must be writable.
 */
enum SdStatus sd_toylm_two_sequence(double p_eot, struct SdToyLm **out_lm);

/**
 * New model whose every conditional is tempered by `temperature`.
 *
 * # Safety
 * `lm` must come from this library; `out_lm` must be writable.
 */
enum SdStatus sd_toylm_with_temperature(const struct SdToyLm *lm,
                                        double temperature,
                                        struct SdToyLm **out_lm);

/**
 * # Safety
 * `lm` must be null or come from this library, and is not used afterwards.
 */
void sd_toylm_free(struct SdToyLm *lm);

/**
 * Exact sequence-level KL(p || q) in nats.
 *
 * # Safety
 * `p` and `q` must come from this library; `out_value` must be writable.
 */
enum SdStatus sd_seq_kl(const struct SdToyLm *p, const struct SdToyLm *q, double *out_value);

/**
 * Exact sequence-level cross-entropy of q under samples from p.
 *
 * # Safety
 * `p` and `q` must come from this library; `out_value` must be writable.
 */
enum SdStatus sd_seq_ce(const struct SdToyLm *p, const struct SdToyLm *q, double *out_value);

/**
 * Exact sequence-level entropy.
 *
 * # Safety
 * `p` must come from this library; `out_value` must be writable.
 */
enum SdStatus sd_seq_entropy(const struct SdToyLm *p, double *out_value);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SEQDISTILL_H */
