#ifndef IMMUNITY_H
#define IMMUNITY_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdint.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum ImmStatus {
  IMM_STATUS_OK = 0,
  IMM_STATUS_NULL_POINTER = 1,
  IMM_STATUS_INVALID_ARGUMENT = 2,
  IMM_STATUS_SHAPE = 3,
  IMM_STATUS_ARTIFACT_MISSING = 4,
  IMM_STATUS_VERSION = 5,
  IMM_STATUS_IO = 6,
  IMM_STATUS_INTERNAL = 7,
  IMM_STATUS_PANIC = 8,
} ImmStatus;

/**
 * Opaque immunizer handle.
 */
typedef struct ImmImmunizer ImmImmunizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *imm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *imm_version(void);

/**
 * Creates a freshly initialized immunizer.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
enum ImmStatus imm_immunizer_new(uint32_t depth,
                                 uint32_t base_width,
                                 double eps_max,
                                 uint64_t seed,
                                 struct ImmImmunizer **out);

/**
 * Loads an immunizer checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum ImmStatus imm_immunizer_load(const char *path, struct ImmImmunizer **out);

/**
 * Writes the immunizer to a checkpoint file.
 *
 * # Safety
 * `handle` must come from this library and `path` be NUL-terminated.
 */
enum ImmStatus imm_immunizer_save(const struct ImmImmunizer *handle, const char *path);

/**
 * Noise bound of the immunizer.
 *
 * # Safety
 * `handle` must come from this library; `out` must be writable.
 */
enum ImmStatus imm_immunizer_eps_max(const struct ImmImmunizer *handle, double *out);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `handle` must come from this library and not be used afterwards.
 */
void imm_immunizer_free(struct ImmImmunizer *handle);

/**
 * Immunizes a `[0, 1]` float image; `out` receives `height * width * 3`
 * doubles.
 *
 * # Safety
 * Buffers must have the documented sizes; `out` may not alias `image`.
 */
enum ImmStatus imm_immunize(const struct ImmImmunizer *handle,
                            const double *image,
                            const uint8_t *mask,
                            uint32_t height,
                            uint32_t width,
                            double *out);

/**
 * Immunizes an 8-bit RGB image; `out` receives `height * width * 3` bytes.
 *
 * # Safety
 * Buffers must have the documented sizes.
 */
enum ImmStatus imm_immunize_rgb8(const struct ImmImmunizer *handle,
                                 const uint8_t *rgb,
                                 const uint8_t *mask,
                                 uint32_t height,
                                 uint32_t width,
                                 uint8_t *out);

/**
 * SSIM of two float images.
 *
 * # Safety
 * `a` and `b` must hold `height * width * 3` doubles; `out` writable.
 */
enum ImmStatus imm_ssim(const double *a,
                        const double *b,
                        uint32_t height,
                        uint32_t width,
                        double *out);

/**
 * PSNR in dB (peak 1); identical images give +infinity.
 *
 * # Safety
 * As for [`imm_ssim`].
 */
enum ImmStatus imm_psnr(const double *a,
                        const double *b,
                        uint32_t height,
                        uint32_t width,
                        double *out);

/**
 * FSIM on luminance.
 *
 * # Safety
 * As for [`imm_ssim`].
 */
enum ImmStatus imm_fsim(const double *a,
                        const double *b,
                        uint32_t height,
                        uint32_t width,
                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IMMUNITY_H */
