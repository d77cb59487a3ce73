#ifndef TAMIL_H
#define TAMIL_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  TAMIL_STATUS_OK = 0,
  TAMIL_STATUS_NULL_POINTER = 1,
  TAMIL_STATUS_INVALID_UTF8 = 2,
  TAMIL_STATUS_CONFIG = 3,
  TAMIL_STATUS_IO = 4,
  TAMIL_STATUS_RUNTIME = 5,
  TAMIL_STATUS_PANIC = 6,
} TamilStatus;

typedef enum {
  TAMIL_EVAL_MODE_CLASS_IL = 0,
  TAMIL_EVAL_MODE_TASK_IL = 1,
  TAMIL_EVAL_MODE_ORACLE = 2,
} TamilEvalMode;

/**
 * A finished training run: model, buffer and report.
 */
typedef struct TamilRun TamilRun;

/**
 * A task stream, generated or loaded from CSV.
 */
typedef struct TamilStream TamilStream;

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *tamil_last_error(void);

/**
 * Library version as a static string.
 */
const char *tamil_version(void);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void tamil_string_free(char *s);

/**
 * Generates a synthetic stream from a JSON config.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` must be writable.
 */
TamilStatus tamil_stream_generate(const char *config_json, TamilStream **out);

/**
 * Loads a stream from CSV (plus optional manifest).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
TamilStatus tamil_stream_load(const char *path, TamilStream **out);

/**
 * # Safety
 * `stream` must be a live handle; `out` must be writable.
 */
TamilStatus tamil_stream_num_tasks(const TamilStream *stream, size_t *out);

/**
 * # Safety
 * `stream` must be a live handle; `out` must be writable.
 */
TamilStatus tamil_stream_num_classes(const TamilStream *stream, size_t *out);

/**
 * # Safety
 * `stream` must be a live handle; `out` must be writable.
 */
TamilStatus tamil_stream_feature_dim(const TamilStream *stream, size_t *out);

/**
 * # Safety
 * `stream` must come from this library or be null; it is invalid afterwards.
 */
void tamil_stream_free(TamilStream *stream);

/**
 * Trains over the whole stream. `train_json` holds a training config;
 * null or `"{}"` selects the defaults.
 *
 * # Safety
 * `stream` must be a live handle; `train_json` null or NUL-terminated;
 * `out` must be writable.
 */
TamilStatus tamil_run(const TamilStream *stream, const char *train_json, TamilRun **out);

/**
 * Average accuracy over all tasks after the last one.
 *
 * # Safety
 * `run` must be a live handle; `out` must be writable.
 */
TamilStatus tamil_run_final_accuracy(const TamilRun *run, TamilEvalMode mode, double *out);

/**
 * The run report as JSON; free with [`tamil_string_free`].
 *
 * # Safety
 * `run` must be a live handle; `out` must be writable.
 */
TamilStatus tamil_run_report_json(const TamilRun *run, char **out);

/**
 * Class-IL predictions for `rows` row-major samples of `cols` features.
 *
 * # Safety
 * `features` must hold `rows * cols` values and `labels_out` room for
 * `rows` entries.
 */
TamilStatus tamil_run_predict(const TamilRun *run,
                              const double *features,
                              size_t rows,
                              size_t cols,
                              size_t *labels_out);

/**
 * Writes the trained model as a JSON checkpoint.
 *
 * # Safety
 * `run` must be a live handle; `path` must be NUL-terminated.
 */
TamilStatus tamil_run_save_model(const TamilRun *run, const char *path);

/**
 * # Safety
 * `run` must come from this library or be null; it is invalid afterwards.
 */
void tamil_run_free(TamilRun *run);

#endif  /* TAMIL_H */
