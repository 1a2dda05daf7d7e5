#ifndef METAOF_METAOF_H
#define METAOF_METAOF_H

/* C interface to the metaof library. All handles are opaque; every call that
 * can fail returns a metaof_status and leaves a message retrievable with
 * metaof_last_error() on the calling thread. */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define METAOF_API __declspec(dllexport)
#else
#define METAOF_API __attribute__((visibility("default")))
#endif

typedef enum metaof_status {
  METAOF_OK = 0,
  METAOF_ERR_ARGUMENT = 1, /* null pointer, bad variant name, contract violation */
  METAOF_ERR_CONFIG = 2,
  METAOF_ERR_IO = 3,
  METAOF_ERR_NUMERIC = 4, /* NaN/Inf or an undefined quantity */
  METAOF_ERR_INTERNAL = 5
} metaof_status;

typedef struct metaof_config metaof_config;
typedef struct metaof_params metaof_params;
typedef struct metaof_report metaof_report;

typedef struct metaof_gap {
  double train_zero_shot;
  double train_adapted;
  double train_ratio;
  double test_zero_shot;
  double test_adapted;
  double test_ratio;
  int steps;
  int memorized;
} metaof_gap;

METAOF_API const char* metaof_version(void);
/* Message of the last failed call on this thread; "" if none. */
METAOF_API const char* metaof_last_error(void);
METAOF_API const char* metaof_status_name(metaof_status status);

/* ---- configuration ---- */
METAOF_API metaof_status metaof_config_load(const char* path, metaof_config** out);
METAOF_API metaof_status metaof_config_parse(const char* text, metaof_config** out);
/* Overrides or adds one key; validated when the config is used. */
METAOF_API metaof_status metaof_config_set(metaof_config* cfg, const char* key, const char* value);
/* Checks that the config describes a runnable experiment. */
METAOF_API metaof_status metaof_config_validate(const metaof_config* cfg);
/* Writes the 64-char hex SHA-256 plus NUL; `size` must be at least 65. */
METAOF_API metaof_status metaof_config_hash(const metaof_config* cfg, char* buf, size_t size);
METAOF_API void metaof_config_free(metaof_config* cfg);

/* ---- parameters ---- */
METAOF_API metaof_status metaof_params_load(const char* path, metaof_params** out);
METAOF_API metaof_status metaof_params_save(const metaof_params* params, const char* path);
METAOF_API size_t metaof_params_count(const metaof_params* params);
/* Copies min(size, count) values in flatten order. */
METAOF_API metaof_status metaof_params_values(const metaof_params* params, double* buf, size_t size);
METAOF_API void metaof_params_free(metaof_params* params);

/* ---- experiments ---- */
/* Full run of the configured experiment into output_dir (NULL: config value
 * or the default location). */
METAOF_API metaof_status metaof_run(const metaof_config* cfg, const char* output_dir, metaof_report** out);
METAOF_API size_t metaof_report_record_count(const metaof_report* report);
METAOF_API double metaof_report_wall_seconds(const metaof_report* report);
METAOF_API size_t metaof_report_diagnostic_count(const metaof_report* report);
METAOF_API metaof_status metaof_report_diagnostic(const metaof_report* report, size_t index, metaof_gap* out);
METAOF_API size_t metaof_report_sweep_count(const metaof_report* report);
METAOF_API metaof_status metaof_report_sweep(const metaof_report* report, size_t index, double* sigma,
                                             double* accuracy_mean, double* accuracy_std);
/* Path of a file written by the run ("metrics.csv", "report.txt", ...). */
METAOF_API const char* metaof_report_output_dir(const metaof_report* report);
METAOF_API void metaof_report_free(metaof_report* report);

/* Trains one variant ("vanilla", "noise", "meta_augmentation") for one seed.
 * Metrics are written to metrics_csv when it is not NULL. */
METAOF_API metaof_status metaof_train_variant(const metaof_config* cfg, const char* variant, uint64_t seed,
                                              const char* metrics_csv, metaof_params** out);

/* Evaluates params on the held-out meta-train and meta-test samples of
 * `seed`; writes metrics_csv (phase "evaluate"). test_loss receives the
 * meta-test loss after the largest configured number of steps. */
METAOF_API metaof_status metaof_evaluate(const metaof_config* cfg, const metaof_params* params, uint64_t seed,
                                         const char* metrics_csv, double* test_loss);

/* Feedback retraining of theta_star towards meta-test target `target_index`
 * of `seed`. Losses are on the target's query set after the largest
 * configured number of steps. If gradient_path is not NULL the recorded
 * test gradient is saved there. */
METAOF_API metaof_status metaof_feedback(const metaof_config* cfg, const metaof_params* theta_star, uint64_t seed,
                                         int target_index, const char* gradient_path, double* loss_before,
                                         double* loss_after, metaof_params** out);

/* Memorization diagnostic of params on the held-out samples of `seed`. */
METAOF_API metaof_status metaof_diagnose(const metaof_config* cfg, const metaof_params* params, uint64_t seed,
                                         metaof_gap* out);

#ifdef __cplusplus
}
#endif

#endif /* METAOF_METAOF_H */
