#ifndef SPARSESPLAT_H
#define SPARSESPLAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_NULL_POINTER = 1,
  SS_STATUS_INVALID_ARGUMENT = 2,
  SS_STATUS_SHAPE_MISMATCH = 3,
  SS_STATUS_IO = 4,
  SS_STATUS_FORMAT = 5,
  SS_STATUS_NUMERICAL = 6,
  SS_STATUS_PANIC = 7,
} SsStatus;

/**
 * Layer selector for [`ss_render_copy`].
 */
typedef enum SsLayer {
  /**
   * 3 channels.
   */
  SS_LAYER_COLOR = 0,
  /**
   * 1 channel, composited Euclidean depth.
   */
  SS_LAYER_DEPTH = 1,
  /**
   * 1 channel, accumulated opacity.
   */
  SS_LAYER_TRACK = 2,
  /**
   * 1 channel, `1 - track`.
   */
  SS_LAYER_TRANSMITTANCE = 3,
} SsLayer;

/**
 * A pinhole camera.
 */
typedef struct SsCamera SsCamera;

/**
 * A Gaussian cloud.
 */
typedef struct SsCloud SsCloud;

/**
 * Color, depth, track and transmittance of one render.
 */
typedef struct SsRender SsRender;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ss_version(void);

/**
 * Message of the last failed call on this thread; empty if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *ss_last_error_message(void);

/**
 * Reads a cloud from a PLY file.
 */
enum SsStatus ss_cloud_load_ply(const char *path, struct SsCloud **out);

/**
 * Writes a cloud as a PLY file (atomically).
 */
enum SsStatus ss_cloud_save_ply(const struct SsCloud *cloud, const char *path);

/**
 * Number of Gaussians; 0 for a null handle.
 */
size_t ss_cloud_len(const struct SsCloud *cloud);

void ss_cloud_free(struct SsCloud *cloud);

/**
 * Builds a camera. `intrinsics` is `[fx, fy, cx, cy]` in pixels; `rotation`
 * is the 3x3 world-to-camera matrix, row-major; `translation` has 3 entries.
 */
enum SsStatus ss_camera_new(const char *id,
                            const double *intrinsics,
                            size_t width,
                            size_t height,
                            const double *rotation,
                            const double *translation,
                            struct SsCamera **out);

void ss_camera_free(struct SsCamera *camera);

/**
 * Renders `cloud` from `camera` with default thresholds on a black
 * background. Nonzero `normalize_depth` divides depth by track.
 */
enum SsStatus ss_render(const struct SsCloud *cloud,
                        const struct SsCamera *camera,
                        bool normalize_depth,
                        struct SsRender **out);

/**
 * Width and height of a render in pixels.
 */
enum SsStatus ss_render_size(const struct SsRender *render, size_t *width, size_t *height);

/**
 * Copies one layer into `buffer`, which must hold exactly
 * `width * height * channels` values.
 */
enum SsStatus ss_render_copy(const struct SsRender *render,
                             enum SsLayer layer,
                             double *buffer,
                             size_t len);

void ss_render_free(struct SsRender *render);

/**
 * PSNR in dB between two images of the same shape, capped at 99.
 */
enum SsStatus ss_psnr(const double *a,
                      const double *b,
                      size_t width,
                      size_t height,
                      size_t channels,
                      double peak,
                      double *out_db);

/**
 * Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5).
 */
enum SsStatus ss_ssim(const double *a,
                      const double *b,
                      size_t width,
                      size_t height,
                      size_t channels,
                      double *out);

/**
 * `1 - Pearson correlation` of two single-channel depth maps over the pixels
 * where `valid` is nonzero; a null `valid` selects every pixel. Fewer than two
 * selected pixels or a constant raster yields 0 and sets `*degenerate`
 * (which may be null).
 */
enum SsStatus ss_pearson_depth_loss(const double *rendered,
                                    const double *estimated,
                                    const uint8_t *valid,
                                    size_t width,
                                    size_t height,
                                    double *out,
                                    bool *degenerate);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPARSESPLAT_H */
