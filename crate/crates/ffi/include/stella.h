#ifndef STELLA_H
#define STELLA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  STELLA_STATUS_OK = 0,
  STELLA_STATUS_NULL_POINTER = 1,
  STELLA_STATUS_INVALID_ARGUMENT = 2,
  STELLA_STATUS_SHAPE_MISMATCH = 3,
  STELLA_STATUS_CONFIG = 4,
  STELLA_STATUS_IO = 5,
  STELLA_STATUS_NUMERIC = 6,
  STELLA_STATUS_DATA = 7,
  STELLA_STATUS_BUFFER_TOO_SMALL = 8,
  STELLA_STATUS_PANIC = 9,
} StellaStatus;

/**
 * Opaque model handle.
 */
typedef struct StellaModel StellaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *stella_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *stella_version(void);

/**
 * Builds a freshly initialized model. `config_toml` holds model keys
 * (`seq_len`, `[backbone]`, ...) and may be null for defaults.
 *
 * # Safety
 * `config_toml` is null or a NUL-terminated string; `out` is writable.
 */
StellaStatus stella_model_new(const char *config_toml, uint64_t seed, StellaModel **out);

/**
 * Loads a checkpoint written by the command line tool or `stella_model_save`.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
StellaStatus stella_model_load(const char *path, StellaModel **out);

/**
 * # Safety
 * `model` is a live handle; `path` is a NUL-terminated string.
 */
StellaStatus stella_model_save(const StellaModel *model, const char *path);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` is null or a handle not yet freed.
 */
void stella_model_free(StellaModel *model);

/**
 * Input length, horizon and channel count of a model.
 *
 * # Safety
 * `model` is a live handle; the out pointers are writable.
 */
StellaStatus stella_model_dims(const StellaModel *model,
                               size_t *seq_len,
                               size_t *pred_len,
                               size_t *channels);

/**
 * Forecasts `batch` windows. `input` is row-major `[batch, seq_len,
 * channels]` and `output` receives `[batch, pred_len, channels]`.
 *
 * # Safety
 * `input` holds `input_len` doubles and `output` has room for `output_len`.
 */
StellaStatus stella_model_predict(const StellaModel *model,
                                  const double *input,
                                  size_t input_len,
                                  size_t batch,
                                  double *output,
                                  size_t output_len);

/**
 * Renders the behavioral description of one component series into `buf`.
 * `component` is 0 for trend, 1 for seasonal, 2 for residual. `written`
 * receives the text length without the terminator; when `buf` is too
 * small the call fails with `BufferTooSmall` and `written` still reports
 * the needed length.
 *
 * # Safety
 * `series` holds `len` doubles; `buf` has room for `buf_len` bytes.
 */
StellaStatus stella_describe_series(const double *series,
                                    size_t len,
                                    uint32_t component,
                                    size_t top_lags,
                                    char *buf,
                                    size_t buf_len,
                                    size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STELLA_H */
