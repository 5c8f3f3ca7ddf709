#ifndef MTESIM_H
#define MTESIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MtesimMode {
  MTESIM_MODE_OFF = 0,
  MTESIM_MODE_ASYNC = 1,
  MTESIM_MODE_SYNC = 2,
} MtesimMode;

typedef enum MtesimStatus {
  MTESIM_STATUS_OK = 0,
  /**
   * The run ended with a bug report.
   */
  MTESIM_STATUS_BUG = 1,
  MTESIM_STATUS_INVALID_ARGUMENT = 2,
  MTESIM_STATUS_PARSE_ERROR = 3,
  MTESIM_STATUS_SIM_ERROR = 4,
  MTESIM_STATUS_PANIC = 5,
} MtesimStatus;

typedef enum MtesimStep {
  MTESIM_STEP_CONTINUE = 0,
  MTESIM_STEP_HALTED = 1,
  MTESIM_STEP_BUG_REPORTED = 2,
} MtesimStep;

/**
 * A parsed trace program.
 */
typedef struct MtesimProgram MtesimProgram;

/**
 * A machine running one program.
 */
typedef struct MtesimSimulator MtesimSimulator;

/**
 * Run configuration. Start from [`mtesim_config_default`].
 */
typedef struct MtesimConfig {
  enum MtesimMode mode;
  uint64_t seed;
  bool tripwires;
  /**
   * `UINT64_MAX` arms every short granule.
   */
  uint64_t alloc_threshold;
  /**
   * Must be at least 1.
   */
  uint64_t sampling_rate;
  /**
   * Must be at least 1.
   */
  uint16_t access_threshold;
  bool overread_skip;
  bool odd_even;
  bool allow_zero_tag;
} MtesimConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next mtesim call on the same thread.
 */
const char *mtesim_last_error(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library, not yet freed.
 */
void mtesim_string_free(char *s);

struct MtesimConfig mtesim_config_default(void);

/**
 * Parses trace text. On success stores a new handle in `*out`.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MtesimStatus mtesim_program_parse(const char *text, struct MtesimProgram **out);

/**
 * Number of instructions, or 0 for NULL.
 *
 * # Safety
 * `program` must be NULL or a live handle.
 */
size_t mtesim_program_len(const struct MtesimProgram *program);

/**
 * Canonical text of the program; free with `mtesim_string_free`.
 *
 * # Safety
 * `program` must be NULL or a live handle.
 */
char *mtesim_program_render(const struct MtesimProgram *program);

/**
 * # Safety
 * `program` must be NULL or a live handle; it is invalid afterwards.
 */
void mtesim_program_free(struct MtesimProgram *program);

/**
 * Creates a simulator for a copy of `program`.
 *
 * # Safety
 * `program` must be a live handle, `config` NULL (defaults) or valid, and
 * `out` a valid pointer.
 */
enum MtesimStatus mtesim_simulator_new(const struct MtesimProgram *program,
                                       const struct MtesimConfig *config,
                                       struct MtesimSimulator **out);

/**
 * # Safety
 * `sim` must be NULL or a live handle; it is invalid afterwards.
 */
void mtesim_simulator_free(struct MtesimSimulator *sim);

/**
 * Executes one instruction slot and stores what happened in `*out`.
 *
 * # Safety
 * `sim` must be a live handle and `out` a valid pointer.
 */
enum MtesimStatus mtesim_simulator_step(struct MtesimSimulator *sim, enum MtesimStep *out);

/**
 * Runs to the end. Returns `MTESIM_STATUS_OK` on a clean halt and
 * `MTESIM_STATUS_BUG` when a bug was reported.
 *
 * # Safety
 * `sim` must be a live handle.
 */
enum MtesimStatus mtesim_simulator_run(struct MtesimSimulator *sim);

/**
 * Register `index` (0..=31), or 0 when out of range.
 *
 * # Safety
 * `sim` must be NULL or a live handle.
 */
uint64_t mtesim_simulator_register(const struct MtesimSimulator *sim, uint32_t index);

/**
 * JSON run report for the run so far; free with `mtesim_string_free`.
 *
 * # Safety
 * `sim` must be NULL or a live handle.
 */
char *mtesim_simulator_report_json(const struct MtesimSimulator *sim);

/**
 * Parses and runs a trace in one call. When `report_json` is not NULL it
 * receives the JSON report (free with `mtesim_string_free`).
 *
 * # Safety
 * `text` must be a NUL-terminated string; `config` NULL or valid;
 * `report_json` NULL or a valid pointer.
 */
enum MtesimStatus mtesim_run_trace(const char *text,
                                   const struct MtesimConfig *config,
                                   char **report_json);

/**
 * The byte-granular benign-access check for a fault on granule `f & ~15`.
 */
bool mtesim_check_access(uint64_t f,
                         uint64_t start,
                         uint64_t size,
                         uint8_t addrtag,
                         uint8_t memtag,
                         uint8_t metadata);

/**
 * Fraction of physical storage spent on tags: 1/33.
 */
double mtesim_tag_storage_overhead(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MTESIM_H */
