#ifndef STARE_H
#define STARE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  STARE_STATUS_OK = 0,
  STARE_STATUS_NULL_POINTER = 1,
  STARE_STATUS_INVALID_UTF8 = 2,
  STARE_STATUS_NOT_FOUND = 3,
  STARE_STATUS_PARSE = 4,
  STARE_STATUS_INVALID_ARGUMENT = 5,
  STARE_STATUS_WRONG_TASK = 6,
  STARE_STATUS_BUFFER_TOO_SMALL = 7,
  STARE_STATUS_INTERNAL = 8,
} StareStatus;

/**
 * Opaque model handle (encoder or recurrent baseline).
 */
typedef struct StareModel StareModel;

/**
 * Opaque vocabulary handle.
 */
typedef struct StareVocab StareVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *stare_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to fit) and returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
uintptr_t stare_last_error(char *buf, uintptr_t len);

/**
 * Loads a `vocab.json` written by `stare tokenize`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for one write.
 */
StareStatus stare_vocab_load(const char *path, StareVocab **out);

/**
 * # Safety
 * `vocab` must be null or a handle from [`stare_vocab_load`] not yet freed.
 */
void stare_vocab_free(StareVocab *vocab);

/**
 * Number of token ids, or 0 for a null handle.
 *
 * # Safety
 * `vocab` must be null or a live handle.
 */
uintptr_t stare_vocab_size(const StareVocab *vocab);

/**
 * Fixed sequence length, or 0 for a null handle.
 *
 * # Safety
 * `vocab` must be null or a live handle.
 */
uintptr_t stare_vocab_seq_len(const StareVocab *vocab);

/**
 * Token id of a cell, or -1 when the cell is not in the vocabulary.
 *
 * # Safety
 * `vocab` must be null or a live handle.
 */
int64_t stare_vocab_cell_token(const StareVocab *vocab, uint8_t zoom, uint64_t index);

/**
 * Cell index containing a point at `zoom`.
 *
 * # Safety
 * `out` must be valid for one write.
 */
StareStatus stare_map_cell(double lat, double lon, uint8_t zoom, uint64_t *out);

/**
 * Dwell time in whole blocks (ties to even, at least 1); 0 when `block` is
 * not positive.
 */
uint32_t stare_duration_blocks(int64_t dwell_seconds, int64_t block_seconds);

/**
 * Loads any checkpoint written by `stare train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for one write.
 */
StareStatus stare_model_load(const char *path, StareModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`stare_model_load`] not yet freed.
 */
void stare_model_free(StareModel *model);

/**
 * Output width of [`stare_model_predict`]: class count, or 0 for a masked
 * location model or a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t stare_model_n_classes(const StareModel *model);

/**
 * Class probabilities for `n_seqs` sequences of `seq_len` tokens each,
 * stored row-major in `tokens`. Writes `n_seqs * n_classes` values to `out`.
 *
 * # Safety
 * `tokens` must be valid for `n_seqs * seq_len` reads and `out` for
 * `out_len` writes.
 */
StareStatus stare_model_predict(const StareModel *model,
                                const uint32_t *tokens,
                                uintptr_t n_seqs,
                                uintptr_t seq_len,
                                double *out,
                                uintptr_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STARE_H */
