#ifndef MTS_H
#define MTS_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MtsStatus {
  MTS_STATUS_OK = 0,
  MTS_STATUS_NULL_ARGUMENT = 1,
  MTS_STATUS_INVALID_UTF8 = 2,
  MTS_STATUS_INVALID_SPEC = 3,
  MTS_STATUS_INVALID_ARGUMENT = 4,
  MTS_STATUS_SIMULATION_FAILED = 5,
  MTS_STATUS_PANIC = 6,
} MtsStatus;

/**
 * Opaque deployment plan.
 */
typedef struct MtsPlan MtsPlan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call into the library on the same thread.
 */
const char *mts_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void mts_string_free(char *s);

/**
 * Plans a deployment from spec JSON.
 *
 * # Safety
 * `spec_json` must be a nul-terminated string; `out` must be writable.
 */
enum MtsStatus mts_plan_from_json(const char *spec_json, struct MtsPlan **out);

/**
 * # Safety
 * `plan` must be null or a handle from `mts_plan_from_json`, not yet freed.
 */
void mts_plan_free(struct MtsPlan *plan);

/**
 * # Safety
 * `plan` must be a live handle; `out` must be writable.
 */
enum MtsStatus mts_plan_to_json(const struct MtsPlan *plan, char **out);

/**
 * VFs the spec needs on the NIC.
 *
 * # Safety
 * `spec_json` must be a nul-terminated string; `out` must be writable.
 */
enum MtsStatus mts_count_vfs(const char *spec_json, uintptr_t *out);

/**
 * Runs `p2p`, `p2v` or `v2v` with 64-byte packets and writes the metrics
 * JSON to `out`.
 *
 * # Safety
 * `plan` must be a live handle, `scenario` a nul-terminated string and
 * `out` writable.
 */
enum MtsStatus mts_run_scenario(const struct MtsPlan *plan,
                                const char *scenario,
                                uint64_t packets,
                                uint64_t seed,
                                char **out);

/**
 * Fuzzes every tenant VF with `frames` frames. `violations` receives the
 * violation count; `report` may be null, otherwise it receives the report
 * JSON.
 *
 * # Safety
 * `plan` must be a live handle, `violations` writable and `report` null or
 * writable.
 */
enum MtsStatus mts_verify_isolation(const struct MtsPlan *plan,
                                    uint32_t frames,
                                    uint64_t seed,
                                    uint64_t *violations,
                                    char **report);

/**
 * Sets `passed` to 1 if the plan forwards along the golden path, else 0.
 *
 * # Safety
 * `plan` must be a live handle; `passed` must be writable.
 */
enum MtsStatus mts_golden_check(const struct MtsPlan *plan, int32_t *passed);

/**
 * Attacker reach after compromising `component` (`host`, `vswitch:N` or
 * `vm:N`), as JSON.
 *
 * # Safety
 * `plan` must be a live handle, `component` a nul-terminated string and
 * `out` writable.
 */
enum MtsStatus mts_compromise(const struct MtsPlan *plan, const char *component, char **out);

/**
 * Number of security mechanisms between `tenant`'s vswitch and the host
 * kernel.
 *
 * # Safety
 * `plan` must be a live handle, `tenant` a nul-terminated string and
 * `out` writable.
 */
enum MtsStatus mts_security_mechanisms(const struct MtsPlan *plan,
                                       const char *tenant,
                                       uint32_t *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* MTS_H */
