#ifndef OPDEOB_H
#define OPDEOB_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OpdeobStatus {
  OPDEOB_STATUS_OK = 0,
  OPDEOB_STATUS_NULL_ARGUMENT = 1,
  OPDEOB_STATUS_INVALID_UTF8 = 2,
  OPDEOB_STATUS_PARSE = 3,
  /**
   * A model was loaded for the wrong task or is malformed.
   */
  OPDEOB_STATUS_BAD_MODEL = 4,
  OPDEOB_STATUS_ANALYSIS = 5,
  OPDEOB_STATUS_PANIC = 6,
} OpdeobStatus;

/**
 * A saved decision-tree model.
 */
typedef struct OpdeobModel OpdeobModel;

/**
 * A parsed program.
 */
typedef struct OpdeobProgram OpdeobProgram;

/**
 * Per-predicate outcome of one deobfuscation run.
 */
typedef struct OpdeobReport OpdeobReport;

typedef struct OpdeobStats {
  uint64_t predicates;
  uint64_t removed;
  /**
   * Predicted opaque but seen going the other way on random runs.
   */
  uint64_t guarded;
  /**
   * Stripped, then restored after an equivalence failure.
   */
  uint64_t reverted;
  uint64_t errors;
  /**
   * 1 when the output matched the input on every check run.
   */
  uint8_t equivalent;
} OpdeobStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *opdeob_last_error(void);

/**
 * Parses assembly text into a new program handle.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum OpdeobStatus opdeob_program_parse(const char *text, struct OpdeobProgram **out);

/**
 * # Safety
 * `p` must be null or a handle from this library not yet freed.
 */
void opdeob_program_free(struct OpdeobProgram *p);

/**
 * Renders the program as assembly text; free with [`opdeob_string_free`].
 *
 * # Safety
 * `p` must be a live program handle and `out` a valid pointer.
 */
enum OpdeobStatus opdeob_program_to_asm(const struct OpdeobProgram *p, char **out);

/**
 * # Safety
 * `s` must be null or a string returned by this library not yet freed.
 */
void opdeob_string_free(char *s);

/**
 * Loads a saved model (the text written by `opdeob train`).
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum OpdeobStatus opdeob_model_load(const char *text, struct OpdeobModel **out);

/**
 * # Safety
 * `m` must be null or a handle from this library not yet freed.
 */
void opdeob_model_free(struct OpdeobModel *m);

/**
 * Strips the opaque predicates of `p`. With both models null the
 * brute-force oracle decides; otherwise `detector` must be a detection
 * model and `resolver` a deobfuscation model. On success `*out` receives the
 * rewritten program and, when `report` is non-null, `*report` the run report.
 *
 * # Safety
 * `p` must be a live program handle, each model null or live, `out` valid,
 * and `report` null or valid.
 */
enum OpdeobStatus opdeob_deobfuscate(const struct OpdeobProgram *p,
                                     const struct OpdeobModel *detector,
                                     const struct OpdeobModel *resolver,
                                     uint64_t seed,
                                     struct OpdeobProgram **out,
                                     struct OpdeobReport **report);

/**
 * # Safety
 * `r` must be a live report handle and `out` a valid pointer.
 */
enum OpdeobStatus opdeob_report_stats(const struct OpdeobReport *r, struct OpdeobStats *out);

/**
 * `predicate,truth,predicted,action` table; free with [`opdeob_string_free`].
 *
 * # Safety
 * `r` must be a live report handle and `out` a valid pointer.
 */
enum OpdeobStatus opdeob_report_csv(const struct OpdeobReport *r, char **out);

/**
 * # Safety
 * `r` must be null or a handle from this library not yet freed.
 */
void opdeob_report_free(struct OpdeobReport *r);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OPDEOB_H */
