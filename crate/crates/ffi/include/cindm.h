#ifndef CINDM_H
#define CINDM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum CindmStatus {
  CINDM_STATUS_OK = 0,
  CINDM_STATUS_NULL_POINTER = 1,
  CINDM_STATUS_INVALID_ARGUMENT = 2,
  CINDM_STATUS_SHAPE = 3,
  CINDM_STATUS_CONFIG = 4,
  CINDM_STATUS_INVALID_STATE = 5,
  CINDM_STATUS_NON_FINITE = 6,
  CINDM_STATUS_FORMAT = 7,
  CINDM_STATUS_IO = 8,
  CINDM_STATUS_MISSING_CHECKPOINT = 9,
  CINDM_STATUS_PANIC = 10,
} CindmStatus;

// Run configuration (all sections).
typedef struct CindmConfig CindmConfig;

// Designs for one scenario: initial states and, optionally, trajectories.
typedef struct CindmDesign CindmDesign;

// Trained denoiser ready for sampling.
typedef struct CindmModel CindmModel;

// Metrics of a design re-simulated by the solver.
typedef struct CindmEvaluation {
  double design_obj;
  // Valid only when `has_mae` is nonzero.
  double mae;
  int32_t has_mae;
  double projection;
} CindmEvaluation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *cindm_last_error(void);

// Library version as a static NUL-terminated string.
const char *cindm_version(void);

// Default configuration.
struct CindmConfig *cindm_config_new(void);

// Reads a TOML configuration file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CindmStatus cindm_config_load(const char *path, struct CindmConfig **out);

// Overrides every component seed.
//
// # Safety
// `config` must come from this library.
enum CindmStatus cindm_config_set_seed(struct CindmConfig *config, uint64_t seed);

// Sets the guidance weight and diffusion step count used by `cindm_design`.
//
// # Safety
// `config` must come from this library.
enum CindmStatus cindm_config_set_sampler(struct CindmConfig *config, double lambda, size_t steps);

// # Safety
// `config` must come from this library or be null.
void cindm_config_free(struct CindmConfig *config);

// Simulates `n_bodies` balls from `gamma` (`[n_bodies][4]`: x, y, vx, vy in
// box units) for `n_frames` recorded frames into `out`
// (`n_frames * n_bodies * 4` values).
//
// # Safety
// Pointers must reference arrays of at least the stated lengths.
enum CindmStatus cindm_rollout(const struct CindmConfig *config,
                               const double *gamma,
                               size_t n_bodies,
                               size_t n_frames,
                               double *out,
                               size_t out_len);

// Re-simulates `gamma` and scores it against the configured objective.
// `designed` may be null; otherwise it holds the designed trajectory
// (`n_frames * n_bodies * 4` values) and the MAE is reported.
//
// # Safety
// Pointers must reference arrays of at least the stated lengths.
enum CindmStatus cindm_evaluate(const struct CindmConfig *config,
                                const double *gamma,
                                size_t n_bodies,
                                const double *designed,
                                size_t n_frames,
                                struct CindmEvaluation *out);

// Loads a trained denoiser checkpoint (EMA weights).
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CindmStatus cindm_model_load(const char *path, struct CindmModel **out);

// # Safety
// `model` must come from this library or be null.
void cindm_model_free(struct CindmModel *model);

// Compositional guided design of `n_runs` initial states for `n_bodies`
// balls over `n_frames` frames, using the sampler, objective and
// composition settings of `config`.
//
// # Safety
// Handles must come from this library and `out` must be a valid pointer.
enum CindmStatus cindm_design(const struct CindmModel *model,
                              const struct CindmConfig *config,
                              size_t n_bodies,
                              size_t n_frames,
                              size_t n_runs,
                              struct CindmDesign **out);

// Reads a design file written by `cindm_design_save` or the CLI.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CindmStatus cindm_design_load(const char *path, struct CindmDesign **out);

// # Safety
// `design` must come from this library and `path` must be NUL-terminated.
enum CindmStatus cindm_design_save(const struct CindmDesign *design, const char *path);

// Writes run count, bodies and frames of a design. Any output may be null.
//
// # Safety
// `design` must come from this library.
enum CindmStatus cindm_design_shape(const struct CindmDesign *design,
                                    size_t *n_runs,
                                    size_t *n_bodies,
                                    size_t *n_frames);

// Copies the initial state of run `run` (`n_bodies * 4` values).
//
// # Safety
// `out` must hold `out_len` values.
enum CindmStatus cindm_design_gamma(const struct CindmDesign *design,
                                    size_t run,
                                    double *out,
                                    size_t out_len);

// Copies the designed trajectory of run `run`
// (`n_frames * n_bodies * 4` values). Fails with `InvalidState` when the
// design carries no trajectories.
//
// # Safety
// `out` must hold `out_len` values.
enum CindmStatus cindm_design_trajectory(const struct CindmDesign *design,
                                         size_t run,
                                         double *out,
                                         size_t out_len);

// # Safety
// `design` must come from this library or be null.
void cindm_design_free(struct CindmDesign *design);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CINDM_H */
