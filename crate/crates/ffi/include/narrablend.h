#ifndef NARRABLEND_H
#define NARRABLEND_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum NbStatus {
  NB_STATUS_OK = 0,
  NB_STATUS_NULL_ARGUMENT = 1,
  NB_STATUS_INVALID_UTF8 = 2,
  NB_STATUS_PARSE = 3,
  NB_STATUS_VALIDATION = 4,
  NB_STATUS_ARGUMENT = 5,
  NB_STATUS_CONFIG = 6,
  NB_STATUS_IO = 7,
  NB_STATUS_TRANSPORT = 8,
  NB_STATUS_PROTOCOL = 9,
  NB_STATUS_CONTRACT = 10,
  NB_STATUS_SEGMENT = 11,
  NB_STATUS_OUT_OF_RANGE = 12,
  NB_STATUS_BUFFER_TOO_SMALL = 13,
  NB_STATUS_PANIC = 14,
} NbStatus;

/**
 * Run configuration.
 */
typedef struct NbConfig NbConfig;

/**
 * Completed story run.
 */
typedef struct NbRun NbRun;

/**
 * Parsed and validated story script.
 */
typedef struct NbScript NbScript;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *nb_version(void);

/**
 * Message describing the most recent failure on this thread, or NULL. The
 * pointer stays valid until the next library call on this thread.
 */
const char *nb_last_error_message(void);

/**
 * Frees a string returned by this library. NULL is ignored.
 */
void nb_string_free(char *s);

enum NbStatus nb_config_default(struct NbConfig **out);

/**
 * Parses a JSON config document (missing keys take their defaults).
 */
enum NbStatus nb_config_from_json(const char *json, struct NbConfig **out);

/**
 * Sets the seed of every seeded component.
 */
enum NbStatus nb_config_set_seed(struct NbConfig *config, uint64_t seed);

/**
 * Sets the number of denoising (and weighting) steps.
 */
enum NbStatus nb_config_set_steps(struct NbConfig *config, size_t steps);

/**
 * Switches the three mechanisms on (non-zero) or off (zero).
 */
enum NbStatus nb_config_set_mechanisms(struct NbConfig *config,
                                       int32_t dipw,
                                       int32_t twb,
                                       int32_t sar);

/**
 * Effective configuration as pretty JSON; free with `nb_string_free`.
 */
enum NbStatus nb_config_to_json(const struct NbConfig *config, char **out);

void nb_config_free(struct NbConfig *config);

/**
 * Parses and validates a script from `len` bytes of UTF-8 JSON.
 */
enum NbStatus nb_script_parse(const uint8_t *data, size_t len, struct NbScript **out);

/**
 * Number of segments, or 0 for NULL.
 */
size_t nb_script_len(const struct NbScript *script);

void nb_script_free(struct NbScript *script);

/**
 * Generates a story with the built-in toy backbone and mock embeddings.
 */
enum NbStatus nb_generate(const struct NbConfig *config,
                          const struct NbScript *script,
                          struct NbRun **out);

/**
 * Generates a story through a bridge server at `endpoint`
 * (`host:port`, `tcp://host:port` or `stdio:<command>`).
 */
enum NbStatus nb_generate_bridge(const struct NbConfig *config,
                                 const struct NbScript *script,
                                 const char *endpoint,
                                 struct NbRun **out);

void nb_run_free(struct NbRun *run);

size_t nb_run_segment_count(const struct NbRun *run);

/**
 * Number of weighting steps recorded for `segment`, or 0 if out of range.
 */
size_t nb_run_step_count(const struct NbRun *run, size_t segment);

/**
 * Prompt weights `(alpha_scene, alpha_action)` at `step` of `segment`.
 */
enum NbStatus nb_run_weights(const struct NbRun *run,
                             size_t segment,
                             size_t step,
                             double *alpha_scene,
                             double *alpha_action);

/**
 * Boundary discontinuity between segments `boundary + 1` and `boundary + 2`.
 */
enum NbStatus nb_run_boundary_discontinuity(const struct NbRun *run, size_t boundary, double *out);

/**
 * Copies the latents of `segment` (frames in order, each row-major) into
 * `buf`. `*needed` always receives the value count; if `capacity` is
 * smaller, nothing is copied and `BufferTooSmall` is returned.
 */
enum NbStatus nb_run_latents(const struct NbRun *run,
                             size_t segment,
                             double *buf,
                             size_t capacity,
                             size_t *needed);

/**
 * Run metrics as JSON; free with `nb_string_free`.
 */
enum NbStatus nb_run_metrics_json(const struct NbRun *run, char **out);

/**
 * Writes the full run directory (created if missing).
 */
enum NbStatus nb_run_write_dir(const struct NbRun *run, const char *path);

/**
 * Temperature softmax over two scores.
 */
enum NbStatus nb_dipw_weights(double s_scene,
                              double s_action,
                              double tau,
                              double *alpha_scene,
                              double *alpha_action);

/**
 * Normalized decay weights for `frames` frames written to `out[0..frames]`.
 */
enum NbStatus nb_decay_weights(size_t frames, double base, double *out, size_t capacity);

/**
 * Blend factor after action-similarity modulation.
 */
enum NbStatus nb_sar_modulate(double alpha, double similarity, double clamp_max, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NARRABLEND_H */
