#ifndef CSLR_H
#define CSLR_H

/* Generated by cbindgen from cslr-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum {
  /**
   * Success.
   */
  CSLR_STATUS_OK = 0,
  /**
   * A pointer argument was null or a size was inconsistent.
   */
  CSLR_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Loading, parsing, or writing data failed; see the last error.
   */
  CSLR_STATUS_DATA_ERROR = 2,
  /**
   * The computation itself failed; see the last error.
   */
  CSLR_STATUS_NUMERIC_ERROR = 3,
  /**
   * The output buffer is too small; the required size was written.
   */
  CSLR_STATUS_BUFFER_TOO_SMALL = 4,
} CslrStatus;

/**
 * An opaque loaded recognizer.
 */
typedef struct CslrModel CslrModel;

/**
 * Minimum-edit alignment counts between a reference and a hypothesis.
 */
typedef struct {
  uintptr_t substitutions;
  uintptr_t insertions;
  uintptr_t deletions;
  uintptr_t reference_length;
} CslrEditCounts;

/**
 * Copy the last error message (UTF-8, NUL-terminated) into `buf`. Returns
 * the full message length in bytes excluding the NUL; when `buf_len` is
 * too small the message is truncated.
 *
 * # Safety
 * `buf` must point to `buf_len` writable bytes (or be null, in which case
 * only the length is reported).
 */
uintptr_t cslr_last_error_message(char *buf, uintptr_t buf_len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cslr_version(void);

/**
 * Load a self-describing checkpoint directory. Returns null on failure
 * (see [`cslr_last_error_message`]).
 *
 * # Safety
 * `checkpoint_dir` must be a NUL-terminated UTF-8 path or null.
 */
CslrModel *cslr_model_load(const char *checkpoint_dir);

/**
 * Release a model returned by [`cslr_model_load`]. Null is a no-op.
 *
 * # Safety
 * `model` must have come from [`cslr_model_load`] and not be freed twice.
 */
void cslr_model_free(CslrModel *model);

/**
 * Vocabulary size (gloss ids run 1..=vocab_size; 0 is the blank).
 *
 * # Safety
 * `model` must be a live handle from [`cslr_model_load`].
 */
uintptr_t cslr_model_vocab_size(const CslrModel *model);

/**
 * Recognize one video and write the decoded gloss ids.
 *
 * `video` is row-major `[channels, frames, height, width]` (the layout the
 * dataset files use). On success `*out_len` holds the number of ids
 * written; when `out_cap` is too small, the required length is stored and
 * `CSLR_BUFFER_TOO_SMALL` returned.
 *
 * # Safety
 * `video` must hold `channels*frames*height*width` floats; `out_ids` must
 * hold `out_cap` entries; `out_len` must be writable.
 */
CslrStatus cslr_model_infer(const CslrModel *model,
                            const float *video,
                            uintptr_t channels,
                            uintptr_t frames,
                            uintptr_t height,
                            uintptr_t width,
                            uint32_t *out_ids,
                            uintptr_t out_cap,
                            uintptr_t *out_len);

/**
 * Best-path decoding of a per-frame score matrix (`[frames, classes]`,
 * class 0 is the blank): argmax per frame, collapse repeats, drop blanks.
 *
 * # Safety
 * `scores` must hold `frames*classes` floats; `out_ids` must hold
 * `out_cap` entries; `out_len` must be writable.
 */
CslrStatus cslr_greedy_decode(const float *scores,
                              uintptr_t frames,
                              uintptr_t classes,
                              uint32_t *out_ids,
                              uintptr_t out_cap,
                              uintptr_t *out_len);

/**
 * Align two gloss id sequences (ids must be nonzero) and report the
 * substitution/insertion/deletion counts of Levenshtein alignment.
 *
 * # Safety
 * `reference` and `hypothesis` must hold the stated number of entries;
 * `out` must be writable.
 */
CslrStatus cslr_edit_alignment(const uint32_t *reference,
                               uintptr_t reference_len,
                               const uint32_t *hypothesis,
                               uintptr_t hypothesis_len,
                               CslrEditCounts *out);

/**
 * Generate a synthetic dataset (train/dev splits plus manifest) under
 * `out_dir`, deterministically from `seed`.
 *
 * # Safety
 * `out_dir` must be a NUL-terminated UTF-8 path.
 */
CslrStatus cslr_generate_dataset(const char *out_dir,
                                 uintptr_t num_train,
                                 uintptr_t num_dev,
                                 uint64_t seed);

#endif  /* CSLR_H */
