/* C interface to the tower stability library.
 *
 * Every function returns a tp_status. On failure, tp_last_error() describes
 * the most recent error on the calling thread. Strings returned through
 * char** out-parameters are owned by the caller and released with
 * tp_free_string. Handles are opaque and released with their _close call.
 */
#ifndef TOWERPHYS_H
#define TOWERPHYS_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define TP_API __declspec(dllexport)
#else
#define TP_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum tp_status {
  TP_OK = 0,
  TP_ERR_INVALID_ARGUMENT = 1, /* bad flag, config, or precondition */
  TP_ERR_IO = 2,               /* missing file or filesystem failure */
  TP_ERR_FORMAT = 3,           /* corrupt, truncated, or wrong-version file */
  TP_ERR_SHAPE = 4,
  TP_ERR_NUMERICAL = 5,        /* non-finite physics or tensor state */
  TP_ERR_DIVERGENCE = 6,       /* training loss became non-finite */
  TP_ERR_QUOTA = 7,            /* balanced generation could not fill a split */
  TP_ERR_INTERNAL = 8
} tp_status;

typedef void (*tp_log_fn)(const char* message, void* user);

TP_API const char* tp_version(void);
TP_API const char* tp_status_name(tp_status status);
TP_API const char* tp_last_error(void);
TP_API void tp_free_string(char* s);

/* Lowercase hex SHA-256 of a file's bytes. */
TP_API tp_status tp_file_digest(const char* path, char** out_hex);

/* ---- datasets ---- */

typedef struct tp_dataset tp_dataset;

/* Generates a balanced dataset of towers with `height` blocks. Split sizes
 * must be even. The file is byte-identical for any worker count. */
TP_API tp_status tp_generate_dataset(int height, int train, int valid, int test, uint64_t seed,
                                     int workers, const char* out_path);
TP_API tp_status tp_dataset_open(const char* path, tp_dataset** out);
TP_API void tp_dataset_close(tp_dataset* dataset);
/* split is "train", "valid", or "test". */
TP_API tp_status tp_dataset_size(const tp_dataset* dataset, const char* split, size_t* out);
TP_API tp_status tp_dataset_manifest(const tp_dataset* dataset, char** out_json);
TP_API tp_status tp_dataset_has_predictions(const tp_dataset* dataset, int* out);
TP_API tp_status tp_dataset_labels(const tp_dataset* dataset, const char* split, size_t index,
                                   int* out_stable, int* out_fallen_count);
/* 64x64x3 interleaved RGB bytes of one frame (0..38) into `out`, which must
 * hold 12288 bytes. */
TP_API tp_status tp_dataset_frame(const tp_dataset* dataset, const char* split, size_t index,
                                  int frame, uint8_t* out);
/* PNG grid of all clip frames (13 per row) of one record. */
TP_API tp_status tp_dataset_export_png(const tp_dataset* dataset, const char* split,
                                       size_t index, const char* png_path);

/* ---- checkpoints ---- */

typedef struct tp_checkpoint tp_checkpoint;

TP_API tp_status tp_checkpoint_open(const char* path, tp_checkpoint** out);
TP_API void tp_checkpoint_close(tp_checkpoint* checkpoint);
TP_API tp_status tp_checkpoint_metadata(const tp_checkpoint* checkpoint, char** out_json);
TP_API tp_status tp_checkpoint_digest(const tp_checkpoint* checkpoint, char** out_hex);
TP_API tp_status tp_checkpoint_parameter_count(const tp_checkpoint* checkpoint, size_t* out);

/* ---- pipeline stages ----
 *
 * Stage configs are JSON objects with optional keys "training" (learning_rate,
 * batch_size, max_epochs, patience, augment) and "model" (architecture
 * fields); unknown keys are rejected. NULL or "" means defaults. Outputs are
 * written atomically. `log` may be NULL.
 */

/* kind is "cd" or "cld". curve_csv_path may be NULL. */
TP_API tp_status tp_train_frame_predictor(const char* kind, const char* data_path,
                                          const char* config_json, uint64_t seed,
                                          const char* checkpoint_path, const char* curve_csv_path,
                                          tp_log_fn log, void* user);
TP_API tp_status tp_predict_frames(const char* checkpoint_path, const char* data_path,
                                   const char* out_path, tp_log_fn log, void* user);
/* kind is "s", "cd", "cld", or "gt". */
TP_API tp_status tp_train_classifier(const char* kind, const char* data_path,
                                     const char* config_json, uint64_t seed,
                                     const char* checkpoint_path, const char* curve_csv_path,
                                     tp_log_fn log, void* user);
TP_API tp_status tp_evaluate(const char* checkpoint_path, const char* data_path,
                             const char* split, char** out_cell_json);
/* Runs or resumes the full matrix. cache_dir may be NULL to use
 * $TOWERPHYS_CACHE or <out_dir>/cache. Writes results.csv, results.txt,
 * results.svg and cells.json into out_dir. */
TP_API tp_status tp_run_matrix(const char* config_json, const char* out_dir, const char* cache_dir,
                               tp_log_fn log, void* user, char** out_table_text);
/* Fully resolved experiment config (defaults filled in). */
TP_API tp_status tp_resolve_experiment_config(const char* config_json, char** out_json);

#ifdef __cplusplus
}
#endif

#endif
