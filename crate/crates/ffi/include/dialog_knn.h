#ifndef DIALOG_KNN_H
#define DIALOG_KNN_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DkStatus {
  DK_STATUS_OK = 0,
  DK_STATUS_NULL_ARGUMENT = 1,
  DK_STATUS_INVALID_UTF8 = 2,
  DK_STATUS_NOT_FOUND = 3,
  DK_STATUS_CONFIG = 4,
  DK_STATUS_PARSE = 5,
  DK_STATUS_VALIDATION = 6,
  DK_STATUS_PROVENANCE = 7,
  DK_STATUS_FORMAT = 8,
  DK_STATUS_IO = 9,
  DK_STATUS_RUNTIME = 10,
  DK_STATUS_PANIC = 11,
} DkStatus;

/**
 * Opaque handle: a loaded checkpoint, vocabulary and retrieval artifacts.
 */
typedef struct DkEngine DkEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a run configuration file and the artifacts it points to.
 * `overrides` is null or newline-separated `key=value` lines applied on top.
 *
 * # Safety
 * String arguments are null or NUL-terminated; `out` is a valid pointer.
 */
enum DkStatus dk_engine_open(const char *config_path, const char *overrides, struct DkEngine **out);

/**
 * # Safety
 * `engine` is null or came from [`dk_engine_open`] and is not used afterwards.
 */
void dk_engine_free(struct DkEngine *engine);

/**
 * Completes one prefix dialog, given as a single JSON object in corpus
 * format ending with a user turn. Writes the assistant text to `out`.
 *
 * # Safety
 * `engine` came from [`dk_engine_open`]; `prefix_json` is NUL-terminated;
 * `out` is a valid pointer. Free the result with [`dk_string_free`].
 */
enum DkStatus dk_engine_generate(const struct DkEngine *engine,
                                 const char *prefix_json,
                                 char **out);

/**
 * # Safety
 * `engine` came from [`dk_engine_open`]; `out` is a valid pointer.
 */
enum DkStatus dk_engine_vocab_size(const struct DkEngine *engine, size_t *out);

/**
 * Corpus BLEU (0..100) of `n` hypothesis/reference sentence pairs.
 *
 * # Safety
 * `hypotheses` and `references` point to `n` NUL-terminated strings each;
 * `out` is a valid pointer.
 */
enum DkStatus dk_bleu(const char *const *hypotheses,
                      const char *const *references,
                      size_t n,
                      double *out);

/**
 * # Safety
 * `s` is null or a string returned by this library, freed at most once.
 */
void dk_string_free(char *s);

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *dk_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIALOG_KNN_H */
