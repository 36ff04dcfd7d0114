#ifndef UAVNOMA_H
#define UAVNOMA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UavnomaStatus {
  UAVNOMA_STATUS_OK = 0,
  UAVNOMA_STATUS_NULL_POINTER = 1,
  UAVNOMA_STATUS_INVALID_UTF8 = 2,
  UAVNOMA_STATUS_DOMAIN = 3,
  UAVNOMA_STATUS_CONTRACT = 4,
  UAVNOMA_STATUS_CONFIG = 5,
  UAVNOMA_STATUS_DIAGNOSTIC = 6,
  UAVNOMA_STATUS_PARSE = 7,
  UAVNOMA_STATUS_IO = 8,
  UAVNOMA_STATUS_OUT_OF_RANGE = 9,
  UAVNOMA_STATUS_PANIC = 10,
} UavnomaStatus;

/**
 * A parsed and validated scenario.
 */
typedef struct UavnomaScenario UavnomaScenario;

/**
 * A solved trajectory together with the configuration it was solved for.
 */
typedef struct UavnomaTrajectory UavnomaTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *uavnoma_last_error_message(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void uavnoma_string_free(char *s);

/**
 * Parses a TOML scenario.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` must be writable.
 */
enum UavnomaStatus uavnoma_scenario_from_toml(const char *toml, struct UavnomaScenario **out);

/**
 * # Safety
 * `s` must come from [`uavnoma_scenario_from_toml`] or be null.
 */
void uavnoma_scenario_free(struct UavnomaScenario *s);

/**
 * # Safety
 * `s` must be a live scenario handle.
 */
enum UavnomaStatus uavnoma_scenario_set_seed(struct UavnomaScenario *s, uint64_t seed);

/**
 * Sets the worker count used by [`uavnoma_scenario_run`].
 *
 * # Safety
 * `s` must be a live scenario handle.
 */
enum UavnomaStatus uavnoma_scenario_set_workers(struct UavnomaScenario *s, size_t workers);

/**
 * Hex SHA-256 scenario hash. Free with [`uavnoma_string_free`].
 *
 * # Safety
 * `s` must be a live scenario handle; `out` must be writable.
 */
enum UavnomaStatus uavnoma_scenario_hash(const struct UavnomaScenario *s, char **out);

/**
 * Runs the scenario into `out_dir` and returns the manifest as JSON.
 * A null `out_dir` uses the scenario's default location. A null
 * `manifest_json` discards the manifest.
 *
 * # Safety
 * `s` must be a live scenario handle; `out_dir` null or NUL-terminated.
 */
enum UavnomaStatus uavnoma_scenario_run(const struct UavnomaScenario *s,
                                        const char *out_dir,
                                        char **manifest_json);

/**
 * Solves one point of a trajectory scenario: user instance `instance`
 * at mission duration `durations[duration_index]`. With `oma` nonzero
 * the OMA baseline is solved instead of joint NOMA.
 *
 * # Safety
 * `s` must be a live scenario handle; `out` must be writable.
 */
enum UavnomaStatus uavnoma_trajectory_solve(const struct UavnomaScenario *s,
                                            size_t instance,
                                            size_t duration_index,
                                            bool oma,
                                            struct UavnomaTrajectory **out);

/**
 * # Safety
 * `t` must come from [`uavnoma_trajectory_solve`] or be null.
 */
void uavnoma_trajectory_free(struct UavnomaTrajectory *t);

/**
 * Number of waypoints N + 1, or 0 for a null handle.
 *
 * # Safety
 * `t` must be a live trajectory handle or null.
 */
size_t uavnoma_trajectory_waypoint_count(const struct UavnomaTrajectory *t);

/**
 * Number of users K, or 0 for a null handle.
 *
 * # Safety
 * `t` must be a live trajectory handle or null.
 */
size_t uavnoma_trajectory_user_count(const struct UavnomaTrajectory *t);

/**
 * Minimum average rate in bits/s/Hz, or NaN for a null handle.
 *
 * # Safety
 * `t` must be a live trajectory handle or null.
 */
double uavnoma_trajectory_min_rate(const struct UavnomaTrajectory *t);

/**
 * Copies interleaved `x, y` waypoints into `xy`, which must hold
 * `2 * waypoint_count` values.
 *
 * # Safety
 * `t` must be a live trajectory handle; `xy` must hold `len` values.
 */
enum UavnomaStatus uavnoma_trajectory_waypoints(const struct UavnomaTrajectory *t,
                                                double *xy,
                                                size_t len);

/**
 * Copies the per-slot powers of `user` (watts) into `powers`, which must
 * hold `waypoint_count` values.
 *
 * # Safety
 * `t` must be a live trajectory handle; `powers` must hold `len` values.
 */
enum UavnomaStatus uavnoma_trajectory_powers(const struct UavnomaTrajectory *t,
                                             size_t user,
                                             double *powers,
                                             size_t len);

/**
 * Copies the average rate of every user into `rates` (`user_count` values).
 *
 * # Safety
 * `t` must be a live trajectory handle; `rates` must hold `len` values.
 */
enum UavnomaStatus uavnoma_trajectory_avg_rates(const struct UavnomaTrajectory *t,
                                                double *rates,
                                                size_t len);

/**
 * LOS probability at `elevation_deg` for the sigmoid parameters `a`, `b`.
 *
 * # Safety
 * `out` must be writable.
 */
enum UavnomaStatus uavnoma_los_probability(double elevation_deg, double a, double b, double *out);

/**
 * Max-min fair power split of `n` users with channel gains `gains`.
 * `coeffs` receives the power fraction of each user, indexed like `gains`.
 *
 * # Safety
 * `gains` and `coeffs` must hold `n` values; `common_rate` must be writable.
 */
enum UavnomaStatus uavnoma_max_min_power(const double *gains,
                                         size_t n,
                                         double total_power,
                                         double noise,
                                         double *coeffs,
                                         double *common_rate);

/**
 * Achievable SIC rates of one NOMA group. `coeffs` are indexed like
 * `gains`; users are decoded weakest first and cancellation is ideal.
 *
 * # Safety
 * `gains`, `coeffs` and `rates` must hold `n` values.
 */
enum UavnomaStatus uavnoma_noma_rates(const double *gains,
                                      const double *coeffs,
                                      size_t n,
                                      double total_power,
                                      double noise,
                                      double *rates);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UAVNOMA_H */
