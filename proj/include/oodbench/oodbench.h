/* oodbench: out-of-distribution generalization benchmark harness, C interface.
 *
 * Every function returns an oodb_status. On failure the message (and, for
 * config errors, the JSON pointer of the offending key) is available from
 * oodb_last_error() / oodb_last_error_pointer() on the calling thread.
 * Strings returned through char** are owned by the caller and released with
 * oodb_string_free(). Handles are released with their *_free function;
 * passing NULL to a free function is a no-op.
 */
#ifndef OODBENCH_OODBENCH_H
#define OODBENCH_OODBENCH_H

#include <stdint.h>

#if defined(_WIN32)
#define OODB_API __declspec(dllexport)
#else
#define OODB_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum oodb_status {
  OODB_OK = 0,
  OODB_ERR_INVALID_ARGUMENT = 1,
  OODB_ERR_FORMAT = 2,
  OODB_ERR_CONSISTENCY = 3,
  OODB_ERR_CAPACITY = 4,
  OODB_ERR_SHAPE = 5,
  OODB_ERR_NUMERIC = 6,
  OODB_ERR_STATE = 7,
  OODB_ERR_CONFIG = 8,
  OODB_ERR_IO = 9,
  OODB_ERR_TRAINING_FAILED = 10,
  OODB_ERR_UNDEFINED = 11,
  OODB_ERR_INTERNAL = 12
} oodb_status;

typedef struct oodb_config oodb_config;
typedef struct oodb_dataset oodb_dataset;
typedef struct oodb_split oodb_split;
typedef struct oodb_model oodb_model;

OODB_API const char* oodb_version(void);
OODB_API const char* oodb_status_name(oodb_status status);
OODB_API const char* oodb_last_error(void);
/* JSON pointer of the last config error, "" otherwise. */
OODB_API const char* oodb_last_error_pointer(void);
OODB_API void oodb_string_free(char* s);

/* ---- configuration ---- */

OODB_API oodb_status oodb_config_default(oodb_config** out);
OODB_API oodb_status oodb_config_load(const char* path, oodb_config** out);
OODB_API oodb_status oodb_config_parse(const char* json_text, oodb_config** out);
/* "/train/epochs=5"; the value is JSON, or a bare string. The config is
 * unchanged when the result does not validate. */
OODB_API oodb_status oodb_config_override(oodb_config* cfg, const char* assignment);
/* Fully expanded effective configuration. */
OODB_API oodb_status oodb_config_to_json(const oodb_config* cfg, char** out);
/* Documented defaults, one "pointer = value" line each. */
OODB_API oodb_status oodb_config_describe_defaults(char** out);
OODB_API void oodb_config_free(oodb_config* cfg);

/* ---- datasets ---- */

/* The dataset described by /data: loaded from /data/source when set,
 * otherwise generated procedurally from the grid layout and /data/seed. */
OODB_API oodb_status oodb_generate(const oodb_config* cfg, oodb_dataset** out);
/* Positions dataset built from an IDX image/label pair with the /data layout
 * (rows, cols, glyph_size, canvas_size); classes_kept <= 0 keeps
 * /data/num_categories classes. */
OODB_API oodb_status oodb_ingest_idx(const oodb_config* cfg, const char* images_path, const char* labels_path,
                                     int classes_kept, oodb_dataset** out);
OODB_API oodb_status oodb_dataset_load(const char* dir, oodb_dataset** out);
OODB_API oodb_status oodb_dataset_save(const oodb_dataset* ds, const char* dir);
OODB_API oodb_status oodb_dataset_info(const oodb_dataset* ds, char** json_out);
OODB_API void oodb_dataset_free(oodb_dataset* ds);

/* ---- splits ---- */

/* Ladder from /split/degrees and /split/seed; partition of the /split/level
 * combination set with /split sizes. */
OODB_API oodb_status oodb_split_create(const oodb_config* cfg, const oodb_dataset* ds, oodb_split** out);
OODB_API oodb_status oodb_split_load(const char* dir, oodb_split** out);
OODB_API oodb_status oodb_split_save(const oodb_split* split, const char* dir);
OODB_API oodb_status oodb_split_info(const oodb_split* split, char** json_out);
OODB_API void oodb_split_free(oodb_split* split);

/* ---- models ---- */

/* Trains with /train on the split. csv_path (may be NULL) receives the epoch
 * log. summary_out (may be NULL) receives a JSON summary. A run that exhausts
 * its restarts returns OODB_ERR_TRAINING_FAILED; the CSV keeps its epochs. */
OODB_API oodb_status oodb_train(const oodb_config* cfg, const oodb_split* split, const char* csv_path,
                                oodb_model** out, char** summary_out);
OODB_API oodb_status oodb_model_save(const oodb_model* model, const char* path);
/* Rebuilds the /network architecture for the dataset's shape and classes. */
OODB_API oodb_status oodb_model_load(const oodb_config* cfg, const oodb_dataset* like, const char* path,
                                     oodb_model** out);
OODB_API oodb_status oodb_model_fingerprint(const oodb_model* model, uint64_t* out);
OODB_API oodb_status oodb_evaluate(const oodb_model* model, const oodb_dataset* ds, double* accuracy);
OODB_API void oodb_model_free(oodb_model* model);

/* ---- analysis and experiments ---- */

/* Activity table, per-neuron scores and the layer summary as JSON. */
OODB_API oodb_status oodb_analyze_si(const oodb_model* model, const oodb_dataset* ds, char** json_out);
/* Finite-difference suite over every layer kind; *passed is 0 or 1. */
OODB_API oodb_status oodb_gradcheck(uint64_t seed, char** json_out, int* passed);
/* Reserved-trial search for one approach at /split/level on /data. */
OODB_API oodb_status oodb_grid_search(const oodb_config* cfg, const char* approach, char** json_out);
/* Full matrix under out_dir (results tree, summary.json and reports). */
OODB_API oodb_status oodb_run_matrix(const oodb_config* cfg, const char* out_dir, char** summary_out);
/* Report CSVs from a summary.json into out_dir. */
OODB_API oodb_status oodb_report(const char* summary_path, const char* out_dir);

#ifdef __cplusplus
}
#endif

#endif
