#ifndef IONSWAP_H
#define IONSWAP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call. The positive codes match the command-line exit codes.
typedef enum IonswapStatus {
  IONSWAP_STATUS_OK = 0,
  // Invalid configuration or arguments.
  IONSWAP_STATUS_CONFIG = 2,
  // Ion escape, unstable potential or other physics failure.
  IONSWAP_STATUS_PHYSICS = 3,
  // Fit or optimizer did not converge.
  IONSWAP_STATUS_FIT = 4,
  IONSWAP_STATUS_NULL_POINTER = -1,
  IONSWAP_STATUS_INVALID_UTF8 = -2,
  IONSWAP_STATUS_PANIC = -3,
} IonswapStatus;

// Calibrated trap geometry.
typedef struct IonswapGeometry IonswapGeometry;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer stays
// valid until the next failing call on the same thread.
const char *ionswap_last_error(void);

// Calibrates the surrogate trap to single-ion secular frequencies (MHz) at
// trap voltage `u_c` (V).
//
// # Safety
// `out` must be a valid pointer.
enum IonswapStatus ionswap_geometry_calibrate(double axial_mhz,
                                              double radial_low_mhz,
                                              double radial_high_mhz,
                                              double u_c,
                                              struct IonswapGeometry **out);

// Releases a geometry. NULL is ignored.
//
// # Safety
// `geometry` must come from [`ionswap_geometry_calibrate`] and not be used afterwards.
void ionswap_geometry_free(struct IonswapGeometry *geometry);

// Six two-ion mode frequencies (MHz) in the hold well at `u_c`, in the order
// axial COM, axial stretch, low radial COM, low rocking, high radial COM,
// high rocking.
//
// # Safety
// `geometry` must be valid and `out` must point to 6 writable doubles.
enum IonswapStatus ionswap_two_ion_modes(const struct IonswapGeometry *geometry,
                                         double u_c,
                                         double *out);

// Simulates one swap of programmed `duration` (µs) with diagonal peak
// `u_d_peak` (V) under the default filter, and reports the largest mean
// phonon number and whether the ions exchanged.
//
// # Safety
// `geometry` must be valid; the out pointers must be writable.
enum IonswapStatus ionswap_swap_excitation(const struct IonswapGeometry *geometry,
                                           double duration,
                                           double u_d_peak,
                                           double *max_n_bar,
                                           bool *swapped);

// Flip probability of a sideband or carrier pulse of length `t` (µs).
// `thermal` selects geometric over Poissonian populations; `transition` is
// 0 carrier, 1 red, 2 blue sideband.
//
// # Safety
// `out` must be writable.
enum IonswapStatus ionswap_rabi_probability(bool thermal,
                                            double n_bar,
                                            int32_t transition,
                                            double eta,
                                            double omega0,
                                            double t,
                                            double *out);

// Runs a command-line subcommand (`"modes"`, `"reorder"`, ...) on a TOML
// configuration and returns its JSON output. `seed` is used when
// `has_seed` is true.
//
// # Safety
// `config_toml` and `command` must be NUL-terminated; `out_json` must be
// writable. The returned string is freed with [`ionswap_string_free`].
enum IonswapStatus ionswap_run(const char *config_toml,
                               const char *command,
                               uint64_t seed,
                               bool has_seed,
                               char **out_json);

// Frees a string returned by the library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void ionswap_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IONSWAP_H */
