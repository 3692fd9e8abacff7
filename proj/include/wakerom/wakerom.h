/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#ifndef WAKEROM_WAKEROM_H
#define WAKEROM_WAKEROM_H

/* C interface of libwakerom. Every function returns a status code; on
 * failure wr_last_error() describes the problem for the calling thread.
 * Handles are opaque and owned by the caller, who releases them with the
 * matching destroy function. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define WR_API __declspec(dllexport)
#else
#define WR_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum wr_status {
  WR_OK = 0,
  WR_ERR_CONFIG = 1,    /* invalid configuration or missing stage input */
  WR_ERR_SHAPE = 2,     /* incompatible dimensions */
  WR_ERR_NUMERIC = 3,   /* non-finite values, failed factorization */
  WR_ERR_CONTRACT = 4,  /* precondition violated */
  WR_ERR_IO = 5,        /* file could not be read or written */
  WR_ERR_CONDITION = 6, /* system too ill-conditioned */
  WR_ERR_ARGUMENT = 7,  /* null pointer or too small buffer */
  WR_ERR_INTERNAL = 8
} wr_status;

WR_API const char* wr_version(void);
WR_API const char* wr_status_name(wr_status status);
/* Message of the last failure on this thread; empty after a success. */
WR_API const char* wr_last_error(void);

/* String results are copied into (buf, cap) with a terminating NUL. The full
 * length without the NUL goes to *needed when it is non-null; a too small
 * buffer yields WR_ERR_ARGUMENT and leaves buf untouched. */

/* ---- pipeline ---- */

typedef struct wr_pipeline wr_pipeline;
typedef void (*wr_log_fn)(const char* line, void* user);

/* config_path may be NULL or empty for the built-in defaults. */
WR_API wr_status wr_pipeline_create(const char* config_path, wr_pipeline** out);
WR_API void wr_pipeline_destroy(wr_pipeline* p);
/* Dotted key such as "rom.epochs"; the value is parsed as JSON, otherwise
 * taken as a string. */
WR_API wr_status wr_pipeline_override(wr_pipeline* p, const char* key, const char* value);
WR_API wr_status wr_pipeline_validate(const wr_pipeline* p);
WR_API wr_status wr_pipeline_set_log(wr_pipeline* p, wr_log_fn fn, void* user);
WR_API wr_status wr_pipeline_config_json(const wr_pipeline* p, char* buf, size_t cap, size_t* needed);
WR_API wr_status wr_pipeline_config_hash(const wr_pipeline* p, char* buf, size_t cap, size_t* needed);
/* Output directory after $WAKEROM_OUTPUT_ROOT is applied. */
WR_API wr_status wr_pipeline_run_dir(const wr_pipeline* p, char* buf, size_t cap, size_t* needed);
WR_API wr_status wr_pipeline_run_stage(wr_pipeline* p, const char* stage);

WR_API size_t wr_stage_count(void);
/* NULL when i is out of range. */
WR_API const char* wr_stage_name(size_t i);

/* ---- models ---- */

typedef struct wr_model wr_model;

WR_API wr_status wr_model_load(const char* path, wr_model** out);
WR_API void wr_model_destroy(wr_model* m);
WR_API wr_status wr_model_dims(const wr_model* m, size_t* state_dim, size_t* latent, size_t* lookback);
/* Ensemble forecast from a row-major [lookback, state_dim] window. Writes the
 * scalar uncertainty to *uq and, when mean is non-null, the ensemble mean as
 * row-major [steps, state_dim]. */
WR_API wr_status wr_model_forecast(const wr_model* m, const double* initial, size_t rows, double xi, size_t steps,
                                   size_t members, uint64_t seed, double* uq, double* mean);

/* ---- metrics ---- */

WR_API wr_status wr_wasserstein2(const double* a, size_t na, const double* b, size_t nb, double* out);
/* norm: 1 or 2. Result in percent. */
WR_API wr_status wr_relative_error(const double* pred, const double* truth, size_t n, int norm, double* out);
/* WR_ERR_CONTRACT when either input is constant. */
WR_API wr_status wr_rank_correlation(const double* a, const double* b, size_t n, double* out);
/* Minimizer over positive diagonals of KL(N(0, sigma) || N(0, diag)), for a
 * row-major SPD [p, p] sigma. */
WR_API wr_status wr_kl_diag_optimum(const double* sigma, size_t p, double* lambda_out);

#ifdef __cplusplus
}
#endif

#endif /* WAKEROM_WAKEROM_H */
