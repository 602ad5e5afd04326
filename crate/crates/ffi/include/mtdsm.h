#ifndef MTDSM_H
#define MTDSM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum MtdsmStatus {
  MTDSM_STATUS_OK = 0,
  MTDSM_STATUS_NULL_POINTER = 1,
  MTDSM_STATUS_INVALID_ARGUMENT = 2,
  MTDSM_STATUS_IO = 3,
  MTDSM_STATUS_FORMAT = 4,
  MTDSM_STATUS_SHAPE_MISMATCH = 5,
  MTDSM_STATUS_CHECKPOINT = 6,
  /**
   * A panic was caught at the boundary.
   */
  MTDSM_STATUS_INTERNAL = 7,
} MtdsmStatus;

/**
 * A height raster in meters.
 */
typedef struct MtdsmHeightMap MtdsmHeightMap;

/**
 * A loaded generator checkpoint.
 */
typedef struct MtdsmModel MtdsmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *mtdsm_last_error(void);

/**
 * Creates a map from `rows * cols` row-major heights.
 *
 * # Safety
 * `values` must point to `rows * cols` readable doubles; `out` must be writable.
 */
enum MtdsmStatus mtdsm_heightmap_new(size_t rows,
                                     size_t cols,
                                     double gsd,
                                     const double *values,
                                     struct MtdsmHeightMap **out);

/**
 * Reads a single-band raster file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MtdsmStatus mtdsm_heightmap_load(const char *path, struct MtdsmHeightMap **out);

/**
 * Writes a map as GeoTIFF (`.tif`) or raw with a sidecar header.
 *
 * # Safety
 * `map` must be a live handle and `path` a NUL-terminated string.
 */
enum MtdsmStatus mtdsm_heightmap_save(const struct MtdsmHeightMap *map, const char *path);

/**
 * # Safety
 * `map` must be a live handle; `rows` and `cols` must be writable.
 */
enum MtdsmStatus mtdsm_heightmap_shape(const struct MtdsmHeightMap *map,
                                       size_t *rows,
                                       size_t *cols);

/**
 * Copies the heights into `buf`, which must hold exactly `rows * cols`
 * values.
 *
 * # Safety
 * `map` must be a live handle; `buf` must point to `len` writable doubles.
 */
enum MtdsmStatus mtdsm_heightmap_values(const struct MtdsmHeightMap *map, double *buf, size_t len);

/**
 * # Safety
 * `map` must be null or a handle not yet freed.
 */
void mtdsm_heightmap_free(struct MtdsmHeightMap *map);

/**
 * Root mean squared difference in meters over cells valid in both maps.
 *
 * # Safety
 * Both maps must be live handles; `out` must be writable.
 */
enum MtdsmStatus mtdsm_rmse(const struct MtdsmHeightMap *pred,
                            const struct MtdsmHeightMap *target,
                            double *out);

/**
 * Runs the geometric vegetation filter.
 *
 * # Safety
 * `input` must be a live handle; `out` must be writable.
 */
enum MtdsmStatus mtdsm_baseline_filter(const struct MtdsmHeightMap *input,
                                       size_t variance_window,
                                       double variance_threshold,
                                       size_t open_radius,
                                       size_t close_radius,
                                       size_t fill_window,
                                       struct MtdsmHeightMap **out);

/**
 * Loads a generator checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MtdsmStatus mtdsm_model_load(const char *path, struct MtdsmModel **out);

/**
 * Predicts a whole map tile by tile. When `roof` is non-null and the model
 * has a segmentation head, the per-pixel roof labels are written there;
 * `roof_len` must then equal `rows * cols`.
 *
 * # Safety
 * `model` and `input` must be live handles; `out` must be writable; `roof`
 * must be null or point to `roof_len` writable bytes.
 */
enum MtdsmStatus mtdsm_model_predict(const struct MtdsmModel *model,
                                     const struct MtdsmHeightMap *input,
                                     size_t tile,
                                     size_t stride,
                                     struct MtdsmHeightMap **out,
                                     uint8_t *roof,
                                     size_t roof_len);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void mtdsm_model_free(struct MtdsmModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MTDSM_H */
