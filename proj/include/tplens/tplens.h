/* C interface to the tplens core. All handles are opaque; every call returns a
 * tpl_status and, on failure, leaves a message retrievable with
 * tpl_last_error() on the calling thread.
 *
 * Buffer convention for variable-length outputs: the required element count is
 * always stored in *len; data is written only when cap >= *len, otherwise the
 * call returns TPL_E_BUFFER_TOO_SMALL. Pass cap = 0 to query the size. */
#ifndef TPLENS_H
#define TPLENS_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define TPL_API __declspec(dllexport)
#else
#define TPL_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum tpl_status {
  TPL_OK = 0,
  TPL_E_INVALID_ARGUMENT = 1,
  TPL_E_SHAPE = 2,
  TPL_E_NUMERIC = 3,
  TPL_E_IO = 4,
  TPL_E_FORMAT = 5,
  TPL_E_SCHEMA = 6,
  TPL_E_STATE = 7,
  TPL_E_DEGENERATE = 8,
  TPL_E_BUFFER_TOO_SMALL = 9,
  TPL_E_INTERNAL = 10
} tpl_status;

typedef enum tpl_activation {
  TPL_ATTN_OUT = 0,
  TPL_MLP_OUT = 1,
  TPL_BLOCK_OUT = 2
} tpl_activation;

typedef enum tpl_precision { TPL_F32 = 0, TPL_BF16 = 1 } tpl_precision;

typedef struct tpl_model tpl_model;
typedef struct tpl_trace tpl_trace;
typedef struct tpl_report tpl_report;
typedef struct tpl_vector tpl_vector;

TPL_API const char* tpl_version(void);
TPL_API const char* tpl_status_name(tpl_status status);
/* Message of the most recent failure on this thread; "" after success. */
TPL_API const char* tpl_last_error(void);

/* ---- model ------------------------------------------------------------ */

typedef struct tpl_model_config {
  uint32_t d_model;
  uint32_t n_layers;
  uint32_t n_heads;
  uint32_t d_ff; /* 0 = 8d/3 rounded up to a multiple of 8 */
  uint32_t vocab_size;
  uint32_t max_seq;
  float rope_theta;
  float norm_eps;
} tpl_model_config;

TPL_API void tpl_model_config_default(tpl_model_config* config);
TPL_API tpl_status tpl_model_create_random(const tpl_model_config* config,
                                           uint64_t seed, tpl_model** out);
TPL_API tpl_status tpl_model_load(const char* path, tpl_model** out);
TPL_API tpl_status tpl_model_save(const tpl_model* model, const char* path);
TPL_API tpl_status tpl_model_get_config(const tpl_model* model,
                                        tpl_model_config* out);
TPL_API tpl_status tpl_model_checksum(const tpl_model* model, uint64_t* out);
TPL_API void tpl_model_free(tpl_model* model);

/* ---- tokens ----------------------------------------------------------- */

/* UTF-8 text to byte tokens with a leading BOS. */
TPL_API tpl_status tpl_encode(const char* text, int32_t* out, size_t cap,
                              size_t* len);
/* "12,7,300" to ids, range-checked against vocab_size. */
TPL_API tpl_status tpl_parse_token_list(const char* list, uint32_t vocab_size,
                                        int32_t* out, size_t cap, size_t* len);
/* Bytes of the tokens, specials dropped; NUL-terminated, *len excludes NUL. */
TPL_API tpl_status tpl_decode(const int32_t* tokens, size_t n, char* out,
                              size_t cap, size_t* len);

/* ---- capture ---------------------------------------------------------- */

/* T * d * layers * types, and its size in bytes at the given precision. */
TPL_API tpl_status tpl_memory_estimate(uint64_t tokens, uint64_t d_model,
                                       uint64_t n_layers, uint64_t n_types,
                                       tpl_precision precision,
                                       uint64_t* elements, uint64_t* bytes);

typedef struct tpl_trace_options {
  const char* layers; /* "all", "a..b" or "a,b,c"; NULL = all */
  const char* types;  /* "attn,mlp,block" style list; NULL = all three */
  uint32_t tp;        /* shard count; 0 or 1 = dense decoder */
  int capture_prefill;
} tpl_trace_options;

TPL_API void tpl_trace_options_default(tpl_trace_options* options);
TPL_API tpl_status tpl_trace_run(const tpl_model* model, const int32_t* prompt,
                                 size_t prompt_len, uint32_t budget,
                                 const tpl_trace_options* options,
                                 tpl_trace** out);
TPL_API tpl_status tpl_trace_save(const tpl_trace* trace, const char* dir);
TPL_API tpl_status tpl_trace_load(const char* dir, tpl_trace** out);
TPL_API tpl_status tpl_trace_generated(const tpl_trace* trace, int32_t* out,
                                       size_t cap, size_t* len);
/* Number of captured steps per trajectory. */
TPL_API tpl_status tpl_trace_steps(const tpl_trace* trace, size_t* out);
/* Copies the [steps x d] trajectory of one (layer, type), row-major. */
TPL_API tpl_status tpl_trace_trajectory(const tpl_trace* trace, uint32_t layer,
                                        tpl_activation type, float* out,
                                        size_t cap, size_t* len);
TPL_API void tpl_trace_free(tpl_trace* trace);

/* ---- lens report ------------------------------------------------------ */

/* Deferred batched projection of every captured trajectory. tp > 1 shards
 * the LM head over that many vocab slices. */
TPL_API tpl_status tpl_report_build(const tpl_trace* trace,
                                    const tpl_model* model, uint32_t k,
                                    uint32_t tp, tpl_report** out);
TPL_API tpl_status tpl_report_save(const tpl_report* report, const char* path);
TPL_API tpl_status tpl_report_load(const char* path, tpl_report** out);
/* Parses report JSON text; schema errors name the offending JSON path. */
TPL_API tpl_status tpl_report_parse(const char* json_text, tpl_report** out);
TPL_API tpl_status tpl_report_top1(const tpl_report* report, uint32_t layer,
                                   tpl_activation type, uint32_t t,
                                   int32_t* id, float* p);
TPL_API tpl_status tpl_report_records(const tpl_report* report, size_t* out);
/* types: NULL = all in the report; layer bounds < 0 = unbounded. */
TPL_API tpl_status tpl_report_svg(const tpl_report* report, const char* types,
                                  int32_t layer_lo, int32_t layer_hi,
                                  const char* path);
TPL_API void tpl_report_free(tpl_report* report);

/* ---- steering --------------------------------------------------------- */

/* Contrastive direction from the mean label-token activation of the target
 * prompts minus that of the base prompts. */
TPL_API tpl_status tpl_vector_build(const tpl_model* model,
                                    const char* const* base_prompts,
                                    size_t n_base,
                                    const char* const* target_prompts,
                                    size_t n_target, uint32_t layer,
                                    tpl_activation type, tpl_vector** out);
/* Normalized LM-head row of `token`, tagged for `layer`. */
TPL_API tpl_status tpl_vector_unembedding(const tpl_model* model, int32_t token,
                                          uint32_t layer, tpl_vector** out);
TPL_API tpl_status tpl_vector_save(const tpl_vector* vector, const char* path);
TPL_API tpl_status tpl_vector_load(const char* path, tpl_vector** out);
TPL_API tpl_status tpl_vector_layer(const tpl_vector* vector, uint32_t* out);
TPL_API void tpl_vector_free(tpl_vector* vector);

typedef struct tpl_sweep_options {
  const char* alphas; /* "lo:hi:n"; NULL = -1.5:1.5:7 */
  const char* site;   /* "attn_out" or "block_out"; NULL = attn_out */
  float clip;         /* relative clip; <= 0 disables clipping */
  uint32_t budget;    /* generated tokens per run, >= 1 */
  uint32_t threads;   /* 0 = hardware concurrency */
  uint64_t seed;      /* shuffled-control permutation seed */
} tpl_sweep_options;

TPL_API void tpl_sweep_options_default(tpl_sweep_options* options);

typedef struct tpl_sweep_summary {
  double mean_slope;
  double std_slope;
  double mean_r2;
  double t_statistic;
  double p_value;
  double control_p_value;
  uint32_t n_prompts;
} tpl_sweep_summary;

/* Dose-response sweep of target-token propensity. Writes JSON (per-prompt
 * series, stats, shuffled control) and CSV when the paths are non-NULL. */
TPL_API tpl_status tpl_steer_sweep(const tpl_model* model,
                                   const tpl_vector* vector,
                                   const char* const* prompts, size_t n_prompts,
                                   int32_t target,
                                   const tpl_sweep_options* options,
                                   const char* json_path, const char* csv_path,
                                   tpl_sweep_summary* summary);

/* ---- benchmark -------------------------------------------------------- */

typedef struct tpl_bench_options {
  const uint32_t* budgets; /* NULL = {100, 300, 500} */
  size_t n_budgets;
  uint32_t repeats; /* >= 3 */
  uint32_t k;
  uint32_t tp;
} tpl_bench_options;

TPL_API void tpl_bench_options_default(tpl_bench_options* options);
/* Writes the JSON report and an optional CSV mirror. speedups, when
 * non-NULL, receives one value per budget (cap = n_budgets). */
TPL_API tpl_status tpl_bench(const tpl_model* model, const int32_t* prompt,
                             size_t prompt_len, const tpl_bench_options* options,
                             const char* json_path, const char* csv_path,
                             double* speedups);

#ifdef __cplusplus
}
#endif

#endif /* TPLENS_H */
