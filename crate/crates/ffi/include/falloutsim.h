#ifndef FALLOUTSIM_H
#define FALLOUTSIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FsStatus {
  FS_STATUS_OK = 0,
  FS_STATUS_NULL_POINTER = 1,
  FS_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad scenario, profile, override or program text.
   */
  FS_STATUS_USAGE = 3,
  /**
   * The run finished but violated its configured contract.
   */
  FS_STATUS_CONTRACT_VIOLATION = 4,
  FS_STATUS_SIMULATION = 5,
  FS_STATUS_BUFFER_TOO_SMALL = 6,
  FS_STATUS_PANIC = 7,
} FsStatus;

/**
 * Microarchitecture profile.
 */
typedef struct FsProfile FsProfile;

/**
 * Result of a scenario run.
 */
typedef struct FsReport FsReport;

/**
 * One simulated core on the lab address space.
 */
typedef struct FsSimulator FsSimulator;

typedef struct FsExecStats {
  uint64_t faults_raised;
  uint64_t aborted_transactions;
  /**
   * µOP index of the fault that ended the program, or -1.
   */
  int64_t terminated_at;
  uint64_t transient_windows;
  uint8_t registers[16];
} FsExecStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *fs_last_error_message(void);

/**
 * Looks up a built-in profile name, a profile in `$FALLOUTSIM_PROFILE_DIR`,
 * or a profile file path.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` writable.
 */
enum FsStatus fs_profile_resolve(const char *name, struct FsProfile **out);

/**
 * The profile in the `key = value` file format.
 *
 * # Safety
 * `profile` must come from `fs_profile_resolve`; `buf` null or writable for
 * `len` bytes; `needed` null or writable.
 */
enum FsStatus fs_profile_to_config(const struct FsProfile *profile,
                                   char *buf,
                                   size_t len,
                                   size_t *needed);

/**
 * # Safety
 * `profile` must be null or come from `fs_profile_resolve`, and not be used afterwards.
 */
void fs_profile_free(struct FsProfile *profile);

/**
 * Runs a named scenario.
 *
 * `profiles` may be null (scenario default) or an array of `n_profiles`
 * handles. `trials` 0 means the scenario default. `overrides` is null or
 * `key=value` pairs separated by `;` or newlines. A run that records
 * contract violations still hands back its report, with
 * `FS_STATUS_CONTRACT_VIOLATION`.
 *
 * # Safety
 * Pointers must be valid as described; `out` writable.
 */
enum FsStatus fs_scenario_run(const char *scenario,
                              const struct FsProfile *const *profiles,
                              size_t n_profiles,
                              uint64_t seed,
                              size_t trials,
                              const char *overrides,
                              struct FsReport **out);

/**
 * # Safety
 * `report` from `fs_scenario_run`; buffer rules as for `fs_profile_to_config`.
 */
enum FsStatus fs_report_csv(const struct FsReport *report, char *buf, size_t len, size_t *needed);

/**
 * # Safety
 * As for `fs_report_csv`.
 */
enum FsStatus fs_report_json(const struct FsReport *report, char *buf, size_t len, size_t *needed);

/**
 * One summary value by key, e.g. `recovered`.
 *
 * # Safety
 * As for `fs_report_csv`; `key` NUL-terminated.
 */
enum FsStatus fs_report_summary(const struct FsReport *report,
                                const char *key,
                                char *buf,
                                size_t len,
                                size_t *needed);

/**
 * Contract violations the run recorded (0 for a conforming run, or for null).
 *
 * # Safety
 * `report` null or from `fs_scenario_run`.
 */
size_t fs_report_violation_count(const struct FsReport *report);

/**
 * # Safety
 * `report` null or from `fs_scenario_run`, not used afterwards.
 */
void fs_report_free(struct FsReport *report);

/**
 * A core with the lab address space. With `revoke_attacker`, the
 * attacker page starts out non-present.
 *
 * # Safety
 * `profile` from `fs_profile_resolve`; `out` writable.
 */
enum FsStatus fs_simulator_new(const struct FsProfile *profile,
                               uint64_t seed,
                               bool revoke_attacker,
                               struct FsSimulator **out);

/**
 * Flushes every probe-array line (the receiver's prime step).
 *
 * # Safety
 * `sim` from `fs_simulator_new`.
 */
enum FsStatus fs_simulator_prime_probe(struct FsSimulator *sim);

/**
 * Runs µOP program text on hardware thread 0. Microarchitectural state
 * carries over between calls.
 *
 * # Safety
 * `sim` from `fs_simulator_new`, `program` NUL-terminated, `stats` null or writable.
 */
enum FsStatus fs_simulator_run(struct FsSimulator *sim,
                               const char *program,
                               struct FsExecStats *stats);

/**
 * Times a reload of all 256 probe slots into `latencies` and returns the
 * slot that hit if exactly one did, else -1, through `single_hit`.
 *
 * # Safety
 * `sim` from `fs_simulator_new`; `latencies` null or 256 writable `uint64_t`;
 * `single_hit` null or writable.
 */
enum FsStatus fs_simulator_read_probe(struct FsSimulator *sim,
                                      uint64_t threshold,
                                      uint64_t *latencies,
                                      int32_t *single_hit);

/**
 * Drops buffered stores and cached lines; memory and page tables stay.
 *
 * # Safety
 * `sim` from `fs_simulator_new`.
 */
enum FsStatus fs_simulator_reset_microarch(struct FsSimulator *sim);

/**
 * # Safety
 * `sim` null or from `fs_simulator_new`, not used afterwards.
 */
void fs_simulator_free(struct FsSimulator *sim);

/**
 * AES-128 key expansion: 16 key bytes in, 176 schedule bytes out.
 *
 * # Safety
 * `key` readable for 16 bytes, `out` writable for 176.
 */
enum FsStatus fs_aes_expand_key(const uint8_t *key, uint8_t *out);

/**
 * Master key from the round-10 key. `rk9` may be null; when given it must
 * agree with the schedule.
 *
 * # Safety
 * `rk10` readable for 16 bytes, `rk9` null or readable for 16, `out` writable for 16.
 */
enum FsStatus fs_aes_reverse_key_schedule(const uint8_t *rk10, const uint8_t *rk9, uint8_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FALLOUTSIM_H */
