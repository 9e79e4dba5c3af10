#ifndef AXSR_H
#define AXSR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum AxsrStatus {
  AXSR_STATUS_OK = 0,
  AXSR_STATUS_NULL_ARGUMENT = 1,
  AXSR_STATUS_INVALID_ARGUMENT = 2,
  AXSR_STATUS_IO = 3,
  AXSR_STATUS_TIFF = 4,
  AXSR_STATUS_SHAPE_MISMATCH = 5,
  AXSR_STATUS_MODE_MISMATCH = 6,
  AXSR_STATUS_CHECKPOINT = 7,
  AXSR_STATUS_NUMERICAL = 8,
  AXSR_STATUS_CONFIG = 9,
  AXSR_STATUS_NON_FINITE_LOSS = 10,
  AXSR_STATUS_PANIC = 11,
  AXSR_STATUS_INTERNAL = 12,
} AxsrStatus;

// Interpolation mode of a loaded model.
typedef enum AxsrMode {
  // Midpoint only.
  AXSR_MODE_FIXED = 0,
  // Any relative position in (0, 1).
  AXSR_MODE_PLUS = 1,
} AxsrMode;

// A trained slice-interpolation network.
typedef struct AxsrModel AxsrModel;

// A z-stack of grayscale slices.
typedef struct AxsrStack AxsrStack;

// Per-slice averages over the generated slices of a stack.
typedef struct AxsrMetrics {
  double rmse;
  double psnr_db;
  double ssim;
  size_t slices_scored;
} AxsrMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread; empty if none. The pointer
// stays valid until the next failing call on the same thread.
const char *axsr_last_error(void);

// Static name of a status code.
const char *axsr_status_name(enum AxsrStatus status);

// Toolkit version, NUL-terminated and static.
const char *axsr_version(void);

// `20·log10(255 / rmse)`; infinite for zero RMSE.
double axsr_psnr_from_rmse(double rmse);

// Loads a checkpoint into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum AxsrStatus axsr_model_load(const char *path, struct AxsrModel **out);

// # Safety
// `model` must come from [`axsr_model_load`] or be null.
void axsr_model_free(struct AxsrModel *model);

// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum AxsrStatus axsr_model_mode(const struct AxsrModel *model, enum AxsrMode *out);

// Number of student parameters (the deployed network).
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum AxsrStatus axsr_model_param_count(const struct AxsrModel *model, size_t *out);

// Reads a multi-page 8- or 16-bit TIFF.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum AxsrStatus axsr_stack_load(const char *path, struct AxsrStack **out);

// Builds a stack from `depth·height·width` intensities in z, y, x order.
// `bits` is 8 or 16.
//
// # Safety
// `data` must point to `depth·height·width` doubles and `out` be valid.
enum AxsrStatus axsr_stack_new(size_t depth,
                               size_t height,
                               size_t width,
                               uint8_t bits,
                               const double *data,
                               struct AxsrStack **out);

// # Safety
// `stack` must come from this library or be null.
void axsr_stack_free(struct AxsrStack *stack);

// # Safety
// `stack` must be live; the output pointers must be valid.
enum AxsrStatus axsr_stack_dims(const struct AxsrStack *stack,
                                size_t *depth,
                                size_t *height,
                                size_t *width);

// Copies the intensities (z, y, x order) into `buf`, which must hold
// exactly `depth·height·width` values.
//
// # Safety
// `stack` must be live and `buf` point to `len` writable doubles.
enum AxsrStatus axsr_stack_read(const struct AxsrStack *stack, double *buf, size_t len);

// # Safety
// `stack` must be live and `path` a NUL-terminated string.
enum AxsrStatus axsr_stack_save(const struct AxsrStack *stack, const char *path);

// `passes` midpoint doublings: `n` slices become `2^passes·(n − 1) + 1`.
//
// # Safety
// Handles must be live and `out` valid.
enum AxsrStatus axsr_double_stack(const struct AxsrModel *model,
                                  const struct AxsrStack *stack,
                                  size_t passes,
                                  struct AxsrStack **out);

// Inserts one slice per entry of `zs` (ascending, inside (0, 1)) into
// every gap. Needs a plus-mode model.
//
// # Safety
// Handles must be live, `zs` point to `n` doubles and `out` be valid.
enum AxsrStatus axsr_upsample_continuous(const struct AxsrModel *model,
                                         const struct AxsrStack *stack,
                                         const double *zs,
                                         size_t n,
                                         struct AxsrStack **out);

// Scores the `stride` generated slices of every gap of `pred` against
// `truth`.
//
// # Safety
// Handles must be live and `out` valid.
enum AxsrStatus axsr_interstack_metrics(const struct AxsrStack *pred,
                                        const struct AxsrStack *truth,
                                        size_t stride,
                                        struct AxsrMetrics *out);

// Degree-5 spherical-harmonic fit of `n` surface points (`xyz` holds
// `3n` coordinates). Writes `P_0..P_5` to `power` (6 values) and the
// roughness to `roughness`.
//
// # Safety
// `xyz` must point to `3n` doubles, `power` to 6 writable doubles and
// `roughness` be valid.
enum AxsrStatus axsr_roughness(const double *xyz, size_t n, double *power, double *roughness);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AXSR_H */
