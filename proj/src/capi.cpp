/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#include "wakerom/wakerom.h"

#include <cstring>
#include <memory>
#include <new>
#include <string>

#include "wakerom/adapt.hpp"
#include "wakerom/error.hpp"
#include "wakerom/metrics.hpp"
#include "wakerom/pipeline.hpp"
#include "wakerom/rom.hpp"

#ifndef WAKEROM_VERSION
#define WAKEROM_VERSION "0.0.0"
#endif

using namespace wakerom;

struct wr_pipeline {
  pipeline::PipelineConfig config;
  wr_log_fn log = nullptr;
  void* user = nullptr;
};

struct wr_model {
  rom::RomModel model;
};

namespace {

thread_local std::string g_last_error;

wr_status fail(wr_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

// Most specific class first: ConditionError derives from NumericError.
template <typename F>
wr_status guard(F&& f) {
  try {
    f();
    g_last_error.clear();
    return WR_OK;
  } catch (const ConfigError& e) {
    return fail(WR_ERR_CONFIG, e.what());
  } catch (const ShapeError& e) {
    return fail(WR_ERR_SHAPE, e.what());
  } catch (const ConditionError& e) {
    return fail(WR_ERR_CONDITION, e.what());
  } catch (const NumericError& e) {
    return fail(WR_ERR_NUMERIC, e.what());
  } catch (const ContractError& e) {
    return fail(WR_ERR_CONTRACT, e.what());
  } catch (const IoError& e) {
    return fail(WR_ERR_IO, e.what());
  } catch (const std::bad_alloc&) {
    return fail(WR_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(WR_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(WR_ERR_INTERNAL, "unknown exception");
  }
}

struct ArgumentError : Error {
  using Error::Error;
};

void need(const void* p, const char* what) {
  if (!p) throw ArgumentError(std::string(what) + " must not be null");
}

wr_status copy_out(const std::string& s, char* buf, std::size_t cap, std::size_t* needed) {
  if (needed) *needed = s.size();
  if (!buf) {
    if (needed) {
      g_last_error.clear();
      return WR_OK;
    }
    return fail(WR_ERR_ARGUMENT, "buffer must not be null");
  }
  if (cap < s.size() + 1) return fail(WR_ERR_ARGUMENT, "buffer holds " + std::to_string(cap) + " bytes, need " +
                                                          std::to_string(s.size() + 1));
  std::memcpy(buf, s.c_str(), s.size() + 1);
  g_last_error.clear();
  return WR_OK;
}

// Argument checks first, then the library errors through guard().
wr_status run(auto&& f) {
  try {
    f();
  } catch (const ArgumentError& e) {
    return fail(WR_ERR_ARGUMENT, e.what());
  } catch (...) {
    return guard([&] { throw; });
  }
  g_last_error.clear();
  return WR_OK;
}

}  // namespace

extern "C" {

const char* wr_version(void) { return WAKEROM_VERSION; }

const char* wr_status_name(wr_status s) {
  switch (s) {
    case WR_OK: return "ok";
    case WR_ERR_CONFIG: return "config error";
    case WR_ERR_SHAPE: return "shape error";
    case WR_ERR_NUMERIC: return "numeric error";
    case WR_ERR_CONTRACT: return "contract error";
    case WR_ERR_IO: return "io error";
    case WR_ERR_CONDITION: return "condition error";
    case WR_ERR_ARGUMENT: return "argument error";
    case WR_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* wr_last_error(void) { return g_last_error.c_str(); }

wr_status wr_pipeline_create(const char* config_path, wr_pipeline** out) {
  return run([&] {
    need(out, "out");
    *out = nullptr;
    auto p = std::make_unique<wr_pipeline>();
    p->config = pipeline::load_config(config_path ? config_path : "");
    *out = p.release();
  });
}

void wr_pipeline_destroy(wr_pipeline* p) { delete p; }

wr_status wr_pipeline_override(wr_pipeline* p, const char* key, const char* value) {
  return run([&] {
    need(p, "pipeline");
    need(key, "key");
    need(value, "value");
    pipeline::apply_override(p->config, key, value);
  });
}

wr_status wr_pipeline_validate(const wr_pipeline* p) {
  return run([&] {
    need(p, "pipeline");
    p->config.validate();
  });
}

wr_status wr_pipeline_set_log(wr_pipeline* p, wr_log_fn fn, void* user) {
  return run([&] {
    need(p, "pipeline");
    p->log = fn;
    p->user = user;
  });
}

wr_status wr_pipeline_config_json(const wr_pipeline* p, char* buf, size_t cap, size_t* needed) {
  std::string s;
  const auto st = run([&] {
    need(p, "pipeline");
    s = nlohmann::json(p->config).dump(2);
  });
  return st == WR_OK ? copy_out(s, buf, cap, needed) : st;
}

wr_status wr_pipeline_config_hash(const wr_pipeline* p, char* buf, size_t cap, size_t* needed) {
  std::string s;
  const auto st = run([&] {
    need(p, "pipeline");
    s = pipeline::config_hash(p->config);
  });
  return st == WR_OK ? copy_out(s, buf, cap, needed) : st;
}

wr_status wr_pipeline_run_dir(const wr_pipeline* p, char* buf, size_t cap, size_t* needed) {
  std::string s;
  const auto st = run([&] {
    need(p, "pipeline");
    s = pipeline::run_directory(p->config).string();
  });
  return st == WR_OK ? copy_out(s, buf, cap, needed) : st;
}

wr_status wr_pipeline_run_stage(wr_pipeline* p, const char* stage) {
  return run([&] {
    need(p, "pipeline");
    need(stage, "stage");
    pipeline::LogFn log;
    if (p->log) log = [p](const std::string& line) { p->log(line.c_str(), p->user); };
    pipeline::run_stage(p->config, stage, log);
  });
}

size_t wr_stage_count(void) { return pipeline::kStages.size(); }

const char* wr_stage_name(size_t i) { return i < pipeline::kStages.size() ? pipeline::kStages[i].c_str() : nullptr; }

wr_status wr_model_load(const char* path, wr_model** out) {
  return run([&] {
    need(out, "out");
    need(path, "path");
    *out = nullptr;
    auto m = std::make_unique<wr_model>();
    m->model = rom::load_checkpoint(path);
    *out = m.release();
  });
}

void wr_model_destroy(wr_model* m) { delete m; }

wr_status wr_model_dims(const wr_model* m, size_t* state_dim, size_t* latent, size_t* lookback) {
  return run([&] {
    need(m, "model");
    if (state_dim) *state_dim = m->model.hyper.state_dim;
    if (latent) *latent = m->model.hyper.latent;
    if (lookback) *lookback = m->model.hyper.lookback;
  });
}

wr_status wr_model_forecast(const wr_model* m, const double* initial, size_t rows, double xi, size_t steps,
                            size_t members, uint64_t seed, double* uq, double* mean) {
  return run([&] {
    need(m, "model");
    need(initial, "initial");
    need(uq, "uq");
    const std::size_t d = m->model.hyper.state_dim;
    Tensor window({rows, d});
    std::memcpy(window.data().data(), initial, rows * d * sizeof(double));
    const auto f = rom::forecast_ensemble(m->model, window, xi, steps, members, seed);
    *uq = rom::uq_scalar(f);
    if (mean) std::memcpy(mean, f.mean.data().data(), steps * d * sizeof(double));
  });
}

wr_status wr_wasserstein2(const double* a, size_t na, const double* b, size_t nb, double* out) {
  return run([&] {
    need(a, "a");
    need(b, "b");
    need(out, "out");
    *out = metrics::wasserstein2({a, na}, {b, nb});
  });
}

wr_status wr_relative_error(const double* pred, const double* truth, size_t n, int norm, double* out) {
  return run([&] {
    need(pred, "pred");
    need(truth, "truth");
    need(out, "out");
    if (norm != 1 && norm != 2) throw ArgumentError("norm must be 1 or 2");
    *out = metrics::relative_error({pred, n}, {truth, n}, norm == 1 ? metrics::Norm::L1 : metrics::Norm::L2);
  });
}

wr_status wr_rank_correlation(const double* a, const double* b, size_t n, double* out) {
  return run([&] {
    need(a, "a");
    need(b, "b");
    need(out, "out");
    const auto r = metrics::rank_correlation({a, n}, {b, n});
    if (!r) throw ContractError("rank_correlation: an input is constant");
    *out = *r;
  });
}

wr_status wr_kl_diag_optimum(const double* sigma, size_t p, double* lambda_out) {
  return run([&] {
    need(sigma, "sigma");
    need(lambda_out, "lambda_out");
    Tensor s({p, p});
    std::memcpy(s.data().data(), sigma, p * p * sizeof(double));
    const auto l = adapt::kl_diag_optimum(s);
    std::memcpy(lambda_out, l.data(), l.size() * sizeof(double));
  });
}

}  // extern "C"
