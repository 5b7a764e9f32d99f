#ifndef PROGSPLAT_H
#define PROGSPLAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Finished reconstruction: scene, trajectory, and summary.
 */
typedef struct PsReconstruction PsReconstruction;

/**
 * Gaussian scene.
 */
typedef struct PsScene PsScene;

typedef int32_t PsStatus;

/**
 * Pinhole camera; image size in pixels.
 */
typedef struct PsIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} PsIntrinsics;

#define PS_OK 0

/**
 * Invalid or missing input, malformed file, bad configuration.
 */
#define PS_E_INPUT 1

/**
 * Pose optimization diverged; partial outputs were written.
 */
#define PS_E_DIVERGED 2

/**
 * Non-finite values or a degenerate numerical problem.
 */
#define PS_E_NUMERIC 3

#define PS_E_IO 4

/**
 * A required pointer argument was null.
 */
#define PS_E_NULL 5

/**
 * The engine panicked; the handle arguments are left untouched.
 */
#define PS_E_PANIC 6

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ps_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`) and returns the full message length
 * excluding the terminator.
 */
size_t ps_last_error(char *buf, size_t len);

/**
 * Loads a scene from a PLY file.
 */
PsStatus ps_scene_load(const char *path, struct PsScene **out);

PsStatus ps_scene_save(const struct PsScene *scene, const char *path);

/**
 * Number of Gaussians; 0 for a null handle.
 */
size_t ps_scene_len(const struct PsScene *scene);

void ps_scene_free(struct PsScene *scene);

/**
 * Renders `scene` from the camera-to-world pose `pose_c2w`
 * (`tx ty tz qx qy qz qw`). `rgb` receives `width*height*3` linear values
 * row-major; `depth`, if not null, receives `width*height` values.
 */
PsStatus ps_render(const struct PsScene *scene,
                   const struct PsIntrinsics *intrinsics,
                   const double *pose_c2w,
                   double *rgb,
                   double *depth);

/**
 * Runs a reconstruction from a JSON configuration (the same document the
 * command line accepts; missing fields take their defaults) and writes its
 * outputs. On `PS_E_DIVERGED` the handle is still set and holds the partial
 * result.
 */
PsStatus ps_reconstruct(const char *config_json, struct PsReconstruction **out);

/**
 * Number of trajectory entries.
 */
size_t ps_reconstruction_len(const struct PsReconstruction *r);

/**
 * Copies up to `capacity` trajectory entries: frame indices into `frames`
 * and camera-to-world poses (`tx ty tz qx qy qz qw`) into `poses`. Returns
 * the number written.
 */
size_t ps_reconstruction_trajectory(const struct PsReconstruction *r,
                                    uint64_t *frames,
                                    double *poses,
                                    size_t capacity);

/**
 * Run summary as JSON, valid until the handle is freed.
 */
const char *ps_reconstruction_summary(const struct PsReconstruction *r);

/**
 * Copies the reconstructed scene into a new handle.
 */
struct PsScene *ps_reconstruction_scene(const struct PsReconstruction *r);

void ps_reconstruction_free(struct PsReconstruction *r);

/**
 * Writes a synthetic bundle (`plane`, `cavity`, `corridor`, or `lowtex`).
 */
PsStatus ps_synth(const char *preset, uint32_t frames, uint64_t seed, const char *out_dir);

/**
 * Absolute trajectory error between two TUM files, rigid alignment unless
 * `align_scale` is non-zero.
 */
PsStatus ps_ate(const char *pred, const char *gt, int32_t align_scale, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROGSPLAT_H */
