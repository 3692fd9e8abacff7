/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#include "wakerom/pipeline.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "svg.hpp"
#include "wakerom/enkf.hpp"
#include "wakerom/error.hpp"
#include "wakerom/sensing.hpp"
#include "wakerom/serialize.hpp"

#ifndef WAKEROM_VERSION
#define WAKEROM_VERSION "0.0.0"
#endif

namespace wakerom::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string> kStages{"generate", "train",      "evaluate", "place-sensors",
                                       "assimilate", "finetune", "report"};

// ---------------------------------------------------------------- config

adapt::RetrainMode FinetuneConfig::retrain_mode() const {
  auto m = adapt::RetrainMode::for_variant(adapt::parse_variant(mode));
  m.epochs = epochs;
  m.learning_rate = learning_rate;
  m.final_lr_fraction = final_lr_fraction;
  m.replay_fraction = replay_fraction;
  return m;
}

rom::RomHyper PipelineConfig::effective_rom() const {
  rom::RomHyper h = rom;
  h.state_dim = flow.state_dim();
  return h;
}

std::vector<double> PipelineConfig::eval_values() const {
  auto v = xi_eval;
  if (std::find(v.begin(), v.end(), xi_target) == v.end()) v.push_back(xi_target);
  return v;
}

namespace {

void check_xi_list(const std::vector<double>& v, const std::string& name) {
  if (v.empty()) throw ConfigError(name + ": must not be empty");
  std::set<double> seen;
  for (double x : v) {
    if (!std::isfinite(x)) throw ConfigError(name + ": values must be finite");
    if (!seen.insert(x).second) throw ConfigError(name + ": repeated value " + std::to_string(x));
  }
}

template <typename F>
void rethrow_as_config(const std::string& prefix, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(prefix + ": " + e.what());
  }
}

}  // namespace

void PipelineConfig::validate() const {
  flow.validate();
  effective_rom().validate();
  check_xi_list(xi_train, "xi_train");
  check_xi_list(xi_eval, "xi_eval");
  if (!std::isfinite(xi_target)) throw ConfigError("xi_target: must be finite");
  if (sensors == 0 || sensors > flow.state_dim()) {
    throw ConfigError("sensors: must lie in [1, " + std::to_string(flow.state_dim()) + "]");
  }
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("epsilon: must be positive");
  if (ensemble < 8) throw ConfigError("ensemble: at least 8 members are needed");
  if (ks_stride == 0) throw ConfigError("ks_stride: must be positive");
  // Odd rows form the test split; the forecast needs a lookback window plus
  // at least one step.
  if (flow.steps / 2 < rom.lookback + 1) {
    throw ConfigError("flow.steps: too few snapshots for a lookback of " + std::to_string(rom.lookback));
  }
  rethrow_as_config("finetune", [&] {
    const auto m = finetune.retrain_mode();
    m.validate();
    if (!(m.final_lr_fraction > 0.0 && m.final_lr_fraction <= 1.0)) {
      throw ConfigError("finetune.final_lr_fraction: must lie in (0, 1]");
    }
  });
  if (output_dir.empty()) throw ConfigError("output_dir: must not be empty");
}

void to_json(json& j, const PipelineConfig& c) {
  j = json::object();
  j["flow"] = c.flow;
  j["rom"] = c.rom;
  j["xi_train"] = c.xi_train;
  j["xi_eval"] = c.xi_eval;
  j["xi_target"] = c.xi_target;
  j["sensors"] = c.sensors;
  j["epsilon"] = c.epsilon;
  j["ensemble"] = c.ensemble;
  j["ks_stride"] = c.ks_stride;
  j["finetune"] = {{"mode", c.finetune.mode},
                   {"epochs", c.finetune.epochs},
                   {"learning_rate", c.finetune.learning_rate},
                   {"final_lr_fraction", c.finetune.final_lr_fraction},
                   {"replay_fraction", c.finetune.replay_fraction}};
  j["seeds"] = {{"train", c.seeds.train},
                {"forecast", c.seeds.forecast},
                {"observation", c.seeds.observation},
                {"finetune", c.seeds.finetune},
                {"ks", c.seeds.ks}};
  j["output_dir"] = c.output_dir;
}

void from_json(const json& j, PipelineConfig& c) {
  reject_unknown_keys(j,
                      {"flow", "rom", "xi_train", "xi_eval", "xi_target", "sensors", "epsilon", "ensemble",
                       "ks_stride", "finetune", "seeds", "output_dir"},
                      "config");
  if (j.contains("flow")) c.flow = j.at("flow").get<synthflow::FlowConfig>();
  if (j.contains("rom")) c.rom = j.at("rom").get<rom::RomHyper>();
  read_field(j, "xi_train", c.xi_train, "config");
  read_field(j, "xi_eval", c.xi_eval, "config");
  read_field(j, "xi_target", c.xi_target, "config");
  read_field(j, "sensors", c.sensors, "config");
  read_field(j, "epsilon", c.epsilon, "config");
  read_field(j, "ensemble", c.ensemble, "config");
  read_field(j, "ks_stride", c.ks_stride, "config");
  read_field(j, "output_dir", c.output_dir, "config");
  if (j.contains("finetune")) {
    const auto& f = j.at("finetune");
    reject_unknown_keys(f, {"mode", "epochs", "learning_rate", "final_lr_fraction", "replay_fraction"}, "finetune");
    read_field(f, "mode", c.finetune.mode, "finetune");
    read_field(f, "epochs", c.finetune.epochs, "finetune");
    read_field(f, "learning_rate", c.finetune.learning_rate, "finetune");
    read_field(f, "final_lr_fraction", c.finetune.final_lr_fraction, "finetune");
    read_field(f, "replay_fraction", c.finetune.replay_fraction, "finetune");
  }
  if (j.contains("seeds")) {
    const auto& s = j.at("seeds");
    reject_unknown_keys(s, {"train", "forecast", "observation", "finetune", "ks"}, "seeds");
    read_field(s, "train", c.seeds.train, "seeds");
    read_field(s, "forecast", c.seeds.forecast, "seeds");
    read_field(s, "observation", c.seeds.observation, "seeds");
    read_field(s, "finetune", c.seeds.finetune, "seeds");
    read_field(s, "ks", c.seeds.ks, "seeds");
  }
}

PipelineConfig load_config(const fs::path& path) {
  PipelineConfig c;
  if (path.empty()) return c;
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
  c = j.get<PipelineConfig>();
  return c;
}

void apply_override(PipelineConfig& config, const std::string& dotted_key, const std::string& value) {
  json j = config;
  json* node = &j;
  std::stringstream ss(dotted_key);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) throw ConfigError(dotted_key + ": unknown key");
    node = &(*node)[part];
  }
  if (node == &j) throw ConfigError("override: empty key");
  json v = json::parse(value, nullptr, false);
  *node = v.is_discarded() ? json(value) : v;
  config = j.get<PipelineConfig>();
}

std::string config_hash(const PipelineConfig& config) {
  json j = config;
  j.erase("output_dir");  // where results go does not change them
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

fs::path run_directory(const PipelineConfig& config) {
  fs::path p(config.output_dir);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("WAKEROM_OUTPUT_ROOT"); root && *root) return fs::path(root) / p;
  return p;
}

// ------------------------------------------------------------ evaluation

std::vector<double> ensemble_energy(const rom::EnsembleForecast& f) {
  const std::size_t T = f.steps(), N = f.members(), m = f.dim();
  std::vector<double> out(T, 0.0);
  const auto s = f.samples.data();
  for (std::size_t t = 0; t < T; ++t) {
    double acc = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      double e = 0.0;
      for (double v : s.subspan((t * N + i) * m, m)) e += v * v;
      acc += e;
    }
    out[t] = acc / double(N);
  }
  return out;
}

HeldOutForecast forecast_held_out(const rom::RomModel& model, const synthflow::SnapshotSet& test,
                                  std::size_t members, std::uint64_t seed) {
  const std::size_t L = model.hyper.lookback;
  if (test.count() <= L) {
    throw ContractError("forecast_held_out: " + std::to_string(test.count()) + " snapshots, need more than " +
                        std::to_string(L));
  }
  HeldOutForecast r;
  r.truth = slice_rows(test.states, L, test.count());
  r.forecast = rom::forecast_ensemble(model, slice_rows(test.states, 0, L), test.xi, r.truth.rows(), members, seed);
  return r;
}

Evaluation evaluate_forecast(const rom::RomModel& model, const HeldOutForecast& run) {
  Evaluation e;
  e.xi = run.forecast.xi;
  e.energy_truth = synthflow::kinetic_energy(run.truth);
  e.energy_pred = ensemble_energy(run.forecast);
  e.w2 = metrics::wasserstein2(e.energy_pred, e.energy_truth);
  e.uq = rom::uq_scalar(run.forecast);
  e.rel_l1 = metrics::relative_error(run.forecast.mean, run.truth, metrics::Norm::L1);
  const auto enc = rom::encode_batch(model, run.truth, e.xi);
  e.recon_l1 = metrics::relative_error(rom::decode_batch(model, enc.mean, e.xi), run.truth, metrics::Norm::L1);
  return e;
}

Evaluation evaluate_model(const rom::RomModel& model, const synthflow::SnapshotSet& test, std::size_t members,
                          std::uint64_t seed) {
  return evaluate_forecast(model, forecast_held_out(model, test, members, seed));
}

KsSummary ks_sweep(const rom::EnsembleForecast& f, std::size_t stride, const metrics::KsNull& null, double alpha) {
  if (stride == 0) throw ContractError("ks_sweep: stride must be positive");
  const std::size_t T = f.steps(), N = f.members(), m = f.dim();
  if (null.size() != N) {
    throw ContractError("ks_sweep: null table for " + std::to_string(null.size()) + " samples, ensemble has " +
                        std::to_string(N));
  }
  KsSummary s;
  std::vector<double> col(N);
  for (std::size_t t = 0; t < T; t += stride) {
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t i = 0; i < N; ++i) col[i] = f.samples[(t * N + i) * m + j];
      const auto r = null.test(col, alpha);
      ++s.tested;
      if (!r.reject) ++s.not_rejected;
      if (r.degenerate) ++s.degenerate;
    }
  }
  return s;
}

// ---------------------------------------------------------------- stages

namespace {

using Clock = std::chrono::steady_clock;

std::string xi_tag(double xi) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", xi);
  return buf;
}

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("write failed: " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_rows(const fs::path& path, const std::vector<metrics::MetricRow>& rows) {
  std::ostringstream os;
  metrics::write_csv(os, rows);
  write_text(path, os.str());
}

std::vector<metrics::MetricRow> read_rows(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<metrics::MetricRow> rows;
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto a = line.find(','), b = line.find(',', a + 1);
    if (a == std::string::npos || b == std::string::npos) throw IoError(path.string() + ": malformed row '" + line + "'");
    rows.push_back({line.substr(0, a), std::stod(line.substr(a + 1, b - a - 1)), std::stod(line.substr(b + 1))});
  }
  return rows;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::vector<double> iota_d(std::size_t n) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = double(i);
  return v;
}

/// Everything a stage needs plus the bookkeeping it produces.
struct Context {
  const PipelineConfig& cfg;
  const LogFn& log;
  fs::path dir;
  std::vector<fs::path> artifacts;

  void say(const std::string& s) const {
    if (log) log(s);
  }
  fs::path out(const std::string& rel) {
    artifacts.push_back(rel);
    const auto p = dir / rel;
    fs::create_directories(p.parent_path());
    return p;
  }
  fs::path in(const std::string& rel, const std::string& producer) const {
    const auto p = dir / rel;
    if (!fs::exists(p)) {
      throw ConfigError("missing input " + p.string() + " (run the '" + producer + "' stage first)");
    }
    return p;
  }
  synthflow::Corpus corpus() const {
    in("corpus/corpus.json", "generate");
    return synthflow::load_corpus(dir / "corpus");
  }
  rom::RomModel model(const std::string& rel, const std::string& producer) const {
    return rom::load_checkpoint(in(rel, producer));
  }
};

/// Snapshots of one parameter value from the corpus, split even/odd.
std::pair<synthflow::SnapshotSet, synthflow::SnapshotSet> series_at(const synthflow::Corpus& corpus, double xi) {
  for (const auto& e : corpus.entries)
    if (e.xi == xi) return synthflow::split_even_odd(corpus.load(e));
  throw ConfigError("corpus has no data at xi = " + xi_tag(xi) + " (rerun 'generate' with this config)");
}

std::vector<rom::TrainingSeries> training_series(const PipelineConfig& cfg, const synthflow::Corpus& corpus) {
  std::vector<rom::TrainingSeries> out;
  for (double xi : cfg.xi_train) out.push_back({xi, series_at(corpus, xi).first.states});
  return out;
}

void write_loss_csv(const fs::path& path, const rom::TrainReport& r) {
  std::string s = "epoch,epoch_loss,monitor_loss\n";
  for (std::size_t e = 0; e < r.monitor_loss.size(); ++e) {
    s += std::to_string(e) + "," + (e ? g17(r.epoch_loss.at(e - 1)) : std::string()) + "," + g17(r.monitor_loss[e]) +
         "\n";
  }
  write_text(path, s);
}

rom::ProgressFn epoch_logger(const Context& ctx, const std::string& tag, std::size_t epochs) {
  return [&ctx, tag, epochs](std::size_t epoch, double loss) {
    if ((epoch + 1) % 10 == 0 || epoch + 1 == epochs) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "%s: epoch %zu/%zu loss %.6g", tag.c_str(), epoch + 1, epochs, loss);
      ctx.say(buf);
    }
  };
}

void stage_generate(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto corpus = synthflow::build_corpus(cfg.xi_train, cfg.eval_values(), cfg.flow, ctx.dir / "corpus");
  ctx.artifacts.push_back("corpus/corpus.json");
  std::set<std::string> files;
  for (const auto& e : corpus.entries) files.insert(e.path);
  for (const auto& f : files) ctx.artifacts.push_back("corpus/" + f);
  ctx.say("generate: " + std::to_string(files.size()) + " trajectories");
}

void stage_train(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto data = training_series(cfg, ctx.corpus());
  const auto hyper = cfg.effective_rom();
  Rng rng(cfg.seeds.train);
  auto model = rom::init_model(hyper, rom::fit_normalization(data), rng);
  const auto report = rom::train(model, data, rng, epoch_logger(ctx, "train", hyper.epochs));
  rom::save_checkpoint(ctx.out("model/init.ckpt"), model);
  write_loss_csv(ctx.out("model/train_loss.csv"), report);
  write_text(ctx.out("model/train_loss.svg"),
             svg::line_chart("Training loss", "epoch", "loss",
                             {{"monitor", kPalette[0], iota_d(report.monitor_loss.size()), report.monitor_loss}}));
}

void stage_evaluate(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto corpus = ctx.corpus();
  const auto model = ctx.model("model/init.ckpt", "train");
  const auto xis = cfg.eval_values();

  std::vector<metrics::MetricRow> rows;
  std::vector<double> w2s, uqs;
  std::string energy_csv = "xi,t,energy_truth,energy_pred\n";
  KsSummary ks;
  for (double xi : xis) {
    const auto run = forecast_held_out(model, series_at(corpus, xi).second, cfg.ensemble, cfg.seeds.forecast);
    const auto e = evaluate_forecast(model, run);
    rows.push_back({"w2", xi, e.w2});
    rows.push_back({"uq", xi, e.uq});
    rows.push_back({"rel_l1", xi, e.rel_l1});
    rows.push_back({"recon_l1", xi, e.recon_l1});
    w2s.push_back(e.w2);
    uqs.push_back(e.uq);
    for (std::size_t t = 0; t < e.energy_truth.size(); ++t) {
      energy_csv += xi_tag(xi) + "," + std::to_string(t) + "," + g17(e.energy_truth[t]) + "," + g17(e.energy_pred[t]) +
                    "\n";
    }
    const auto ts = iota_d(e.energy_truth.size());
    write_text(ctx.out("eval/energy_xi" + xi_tag(xi) + ".svg"),
               svg::line_chart("Kinetic energy at xi = " + xi_tag(xi), "forecast step", "energy",
                               {{"truth", "#000000", ts, e.energy_truth}, {"ensemble", kPalette[1], ts, e.energy_pred}}));
    if (xi == cfg.xi_target) {
      Rng krng(cfg.seeds.ks);
      const metrics::KsNull null(cfg.ensemble, krng);
      ks = ks_sweep(run.forecast, cfg.ks_stride, null);
    }
    char buf[160];
    std::snprintf(buf, sizeof buf, "evaluate: xi %g w2 %.4g uq %.4g rel_l1 %.3f%%", xi, e.w2, e.uq, e.rel_l1);
    ctx.say(buf);
  }
  write_rows(ctx.out("eval/metrics.csv"), rows);
  write_text(ctx.out("eval/energy.csv"), energy_csv);

  std::vector<std::string> cats;
  for (double xi : xis) cats.push_back(xi_tag(xi));
  const auto norm_to_max = [](std::vector<double> v) {
    const double mx = *std::max_element(v.begin(), v.end());
    if (mx > 0.0)
      for (double& x : v) x /= mx;
    return v;
  };
  write_text(ctx.out("eval/w2_uq.svg"), svg::bar_chart("W2 and UQ relative to their maxima", cats,
                                                       {{"W2", kPalette[0], norm_to_max(w2s)},
                                                        {"UQ", kPalette[3], norm_to_max(uqs)}}));

  json s;
  const auto argmax = [&](const std::vector<double>& v) {
    return xis[std::size_t(std::max_element(v.begin(), v.end()) - v.begin())];
  };
  s["argmax_w2"] = argmax(w2s);
  s["argmax_uq"] = argmax(uqs);
  if (xis.size() >= 3) {
    const auto rho = metrics::rank_correlation(uqs, w2s);
    s["spearman_uq_w2"] = rho ? json(*rho) : json(nullptr);
  } else {
    s["spearman_uq_w2"] = nullptr;
  }
  s["ks"] = {{"xi", cfg.xi_target},
             {"stride", cfg.ks_stride},
             {"tested", ks.tested},
             {"not_rejected", ks.not_rejected},
             {"degenerate", ks.degenerate},
             {"fraction_not_rejected", ks.fraction()}};
  write_json(ctx.out("eval/summary.json"), s);
}

void stage_place_sensors(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto train = series_at(ctx.corpus(), cfg.xi_target).first;
  const std::size_t r = std::min(cfg.sensors, train.count());
  const auto basis = sensing::pod_basis(train.states, r);
  const auto layout = sensing::place_sensors(basis, cfg.sensors);
  sensing::save_layout(ctx.out("sensors/layout.json"), layout);
  sensing::save_basis(ctx.out("sensors/basis.rmx"), basis);
  ctx.artifacts.push_back("sensors/basis.json");

  const std::size_t nx = cfg.flow.nx, ny = cfg.flow.ny, g = nx * ny;
  for (int comp = 0; comp < 2; ++comp) {
    std::vector<double> field(g);
    for (std::size_t k = 0; k < g; ++k) field[k] = std::abs(basis.psi(comp * g + k, 0));
    std::vector<svg::Marker> marks;
    for (auto idx : layout.indices) {
      if (idx / g == std::size_t(comp)) marks.push_back({(idx % g) % nx, (idx % g) / nx, kPalette[1]});
    }
    const char* name = comp == 0 ? "u" : "v";
    write_text(ctx.out(std::string("sensors/overlay_") + name + ".svg"),
               svg::grid_overlay(std::string("Sensors on |leading mode|, ") + name + " field", nx, ny, field, marks));
  }
  ctx.say("place-sensors: " + std::to_string(layout.size()) + " sensors from a rank-" + std::to_string(r) + " basis");
}

/// Observation noise variance in physical units: epsilon is stated for
/// normalized states.
double physical_epsilon(const PipelineConfig& cfg, const rom::RomModel& model) {
  const double s = model.norm.scale.at(0);
  return cfg.epsilon * s * s;
}

void stage_assimilate(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto corpus = ctx.corpus();
  const auto model = ctx.model("model/init.ckpt", "train");
  const auto layout = sensing::load_layout(ctx.in("sensors/layout.json", "place-sensors"));
  if (layout.m != model.hyper.state_dim) throw ConfigError("sensors/layout.json: state size differs from the model");

  const auto run = forecast_held_out(model, series_at(corpus, cfg.xi_target).second, cfg.ensemble, cfg.seeds.forecast);
  const std::size_t T = run.truth.rows(), n = layout.size();
  const double eps = physical_epsilon(cfg, model);
  Tensor y = sensing::observe(run.truth, layout);
  Rng nrng(cfg.seeds.observation);
  const double sd = std::sqrt(eps);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < n; ++k) y(t, k) += sd * nrng.normal();
  const auto an = enkf::assimilate(run.forecast, enkf::ObservationSeries{y, layout, eps});

  enkf::save_analysis(ctx.out("assim/analysis/samples.rmx").parent_path(), an);
  for (const char* f : {"mean.rmx", "variance.rmx", "analysis.json"}) ctx.artifacts.push_back(std::string("assim/analysis/") + f);
  save_rmx(ctx.out("assim/observations.rmx"), y);

  const std::size_t m = run.truth.cols();
  std::vector<double> ef(T), ea(T);
  double sf = 0.0, sa = 0.0;
  std::string csv = "t,forecast_mse,analysis_mse\n";
  for (std::size_t t = 0; t < T; ++t) {
    double a = 0.0, b = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double d1 = run.forecast.mean(t, j) - run.truth(t, j), d2 = an.mean(t, j) - run.truth(t, j);
      a += d1 * d1;
      b += d2 * d2;
    }
    ef[t] = a / double(m);
    ea[t] = b / double(m);
    sf += ef[t];
    sa += ea[t];
    csv += std::to_string(t) + "," + g17(ef[t]) + "," + g17(ea[t]) + "\n";
  }
  write_text(ctx.out("assim/error.csv"), csv);
  const auto ts = iota_d(T);
  write_text(ctx.out("assim/error.svg"), svg::line_chart("Forecast and filter error", "step", "MSE",
                                                         {{"forecast", kPalette[0], ts, ef}, {"analysis", kPalette[1], ts, ea}}));
  const double ratio = sf > 0.0 ? sa / sf : 0.0;
  write_json(ctx.out("assim/summary.json"), {{"xi", cfg.xi_target},
                                             {"sensors", n},
                                             {"epsilon_normalized", cfg.epsilon},
                                             {"epsilon_physical", eps},
                                             {"forecast_mse", sf / double(T)},
                                             {"analysis_mse", sa / double(T)},
                                             {"mse_ratio", ratio}});
  char buf[128];
  std::snprintf(buf, sizeof buf, "assimilate: analysis/forecast MSE ratio %.4f", ratio);
  ctx.say(buf);
}

void stage_finetune(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto corpus = ctx.corpus();
  const auto model = ctx.model("model/init.ckpt", "train");
  const auto mode = cfg.finetune.retrain_mode();
  const auto replay = training_series(cfg, corpus);
  Rng rng(cfg.seeds.finetune);
  const auto progress = epoch_logger(ctx, "finetune", mode.epochs);
  adapt::FinetuneResult res = [&] {
    if (mode.source == adapt::DataSource::analysis_mean) {
      const auto an = enkf::load_analysis(ctx.in("assim/analysis/analysis.json", "assimilate").parent_path());
      return adapt::finetune(model, mode, an, cfg.xi_target, replay, rng, progress);
    }
    const rom::TrainingSeries fresh{cfg.xi_target, series_at(corpus, cfg.xi_target).first.states};
    return adapt::finetune(model, mode, fresh, replay, rng, progress);
  }();
  rom::save_checkpoint(ctx.out("model/finetuned.ckpt"), res.model);
  write_loss_csv(ctx.out("finetune/loss.csv"), res.report);

  std::vector<double> xis = cfg.xi_train;
  if (std::find(xis.begin(), xis.end(), cfg.xi_target) == xis.end()) xis.push_back(cfg.xi_target);
  std::vector<metrics::MetricRow> rows;
  std::vector<double> before, after;
  std::vector<std::string> cats;
  for (double xi : xis) {
    const auto test = series_at(corpus, xi).second;
    const auto e0 = evaluate_model(model, test, cfg.ensemble, cfg.seeds.forecast);
    const auto e1 = evaluate_model(res.model, test, cfg.ensemble, cfg.seeds.forecast);
    rows.push_back({"w2_before", xi, e0.w2});
    rows.push_back({"w2_after", xi, e1.w2});
    rows.push_back({"w2_change", xi, e0.w2 > 0.0 ? e1.w2 / e0.w2 - 1.0 : 0.0});
    rows.push_back({"recon_l1_before", xi, e0.recon_l1});
    rows.push_back({"recon_l1_after", xi, e1.recon_l1});
    rows.push_back({"rel_l1_before", xi, e0.rel_l1});
    rows.push_back({"rel_l1_after", xi, e1.rel_l1});
    before.push_back(e0.w2);
    after.push_back(e1.w2);
    cats.push_back(xi_tag(xi));
    if (xi == cfg.xi_target) {
      const auto ts = iota_d(e0.energy_truth.size());
      write_text(ctx.out("finetune/energy_xi" + xi_tag(xi) + ".svg"),
                 svg::line_chart("Kinetic energy at xi = " + xi_tag(xi) + " before and after " + cfg.finetune.mode,
                                 "forecast step", "energy",
                                 {{"truth", "#000000", ts, e0.energy_truth},
                                  {"before", kPalette[0], ts, e0.energy_pred},
                                  {"after", kPalette[1], ts, e1.energy_pred}}));
    }
    char buf[160];
    std::snprintf(buf, sizeof buf, "finetune: xi %g w2 %.4g -> %.4g", xi, e0.w2, e1.w2);
    ctx.say(buf);
  }
  write_rows(ctx.out("finetune/comparison.csv"), rows);
  write_text(ctx.out("finetune/w2.svg"),
             svg::bar_chart("Energy distance before and after " + cfg.finetune.mode, cats,
                            {{"before", kPalette[0], before}, {"after", kPalette[1], after}}));
}

void stage_report(Context& ctx) {
  const auto& cfg = ctx.cfg;
  std::vector<metrics::MetricRow> rows;
  for (const auto& r : read_rows(ctx.in("eval/metrics.csv", "evaluate"))) rows.push_back({"eval_" + r.metric, r.xi, r.value});
  const auto eval_summary = read_json(ctx.in("eval/summary.json", "evaluate"));
  const auto assim = read_json(ctx.in("assim/summary.json", "assimilate"));
  rows.push_back({"assim_mse_ratio", cfg.xi_target, assim.at("mse_ratio").get<double>()});
  for (const auto& r : read_rows(ctx.in("finetune/comparison.csv", "finetune"))) {
    rows.push_back({"finetune_" + r.metric, r.xi, r.value});
  }

  const auto model = ctx.model("model/finetuned.ckpt", "finetune");
  const auto an = enkf::load_analysis(ctx.in("assim/analysis/analysis.json", "assimilate").parent_path());
  const auto mom = adapt::second_moment_check(model, an, cfg.xi_target);
  {
    std::ostringstream os;
    adapt::write_moment_csv(os, mom);
    write_text(ctx.out("report/moments.csv"), os.str());
  }
  std::vector<svg::Series> series;
  const std::size_t T = mom.rel_discrepancy.rows();
  for (std::size_t k = 0; k < mom.time_median.size(); ++k) {
    rows.push_back({"moment_median_rel_discrepancy_" + std::to_string(k), cfg.xi_target, mom.time_median[k]});
    std::vector<double> y(T);
    for (std::size_t t = 0; t < T; ++t) y[t] = std::log10(mom.rel_discrepancy(t, k));
    series.push_back({"z" + std::to_string(k), kPalette[k % 8], iota_d(T), y});
  }
  write_text(ctx.out("report/moments.svg"),
             svg::line_chart("Encoder variance vs analysis spread", "step", "log10 relative discrepancy", series));
  write_rows(ctx.out("report/metrics.csv"), rows);

  json s;
  s["config_hash"] = config_hash(cfg);
  s["evaluation"] = eval_summary;
  s["assimilation"] = assim;
  s["moments_time_median"] = mom.time_median;
  write_json(ctx.out("report/summary.json"), s);

  // One folder with every figure of the run.
  for (const char* sub : {"model", "eval", "sensors", "assim", "finetune"}) {
    const auto d = ctx.dir / sub;
    if (!fs::is_directory(d)) continue;
    std::vector<fs::path> svgs;
    for (const auto& e : fs::directory_iterator(d))
      if (e.path().extension() == ".svg") svgs.push_back(e.path());
    std::sort(svgs.begin(), svgs.end());
    for (const auto& p : svgs) {
      const auto rel = std::string("report/figures/") + sub + "_" + p.filename().string();
      fs::copy_file(p, ctx.out(rel), fs::copy_options::overwrite_existing);
    }
  }
}

json versions() {
  return {{"wakerom", WAKEROM_VERSION},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"compiler", __VERSION__}};
}

void record(const fs::path& dir, const PipelineConfig& cfg, const std::string& stage,
            const std::vector<fs::path>& artifacts, double seconds) {
  for (const auto& a : artifacts) {
    if (!fs::exists(dir / a)) throw IoError("stage '" + stage + "' did not produce " + (dir / a).string());
  }
  const auto path = dir / "manifest.json";
  json m = fs::exists(path) ? read_json(path) : json::object();
  m["config_hash"] = config_hash(cfg);
  m["config"] = cfg;
  m["versions"] = versions();
  if (!m.contains("stages") || !m["stages"].is_object()) m["stages"] = json::object();
  json list = json::array();
  for (const auto& a : artifacts) list.push_back(a.generic_string());
  m["stages"][stage] = {{"artifacts", list}, {"seconds", seconds}, {"config_hash", config_hash(cfg)}};
  write_json(path, m);
}

}  // namespace

void run_stage(const PipelineConfig& config, const std::string& stage, const LogFn& log) {
  if (std::find(kStages.begin(), kStages.end(), stage) == kStages.end()) {
    throw ConfigError("stage: unknown stage '" + stage + "'");
  }
  config.validate();
  Context ctx{config, log, run_directory(config), {}};
  std::error_code ec;
  fs::create_directories(ctx.dir, ec);
  if (ec) throw IoError("cannot create " + ctx.dir.string() + ": " + ec.message());

  const auto t0 = Clock::now();
  if (stage == "generate") stage_generate(ctx);
  else if (stage == "train") stage_train(ctx);
  else if (stage == "evaluate") stage_evaluate(ctx);
  else if (stage == "place-sensors") stage_place_sensors(ctx);
  else if (stage == "assimilate") stage_assimilate(ctx);
  else if (stage == "finetune") stage_finetune(ctx);
  else stage_report(ctx);
  const double seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  record(ctx.dir, config, stage, ctx.artifacts, seconds);
}

void run_all(const PipelineConfig& config, const LogFn& log) {
  for (const auto& s : kStages) run_stage(config, s, log);
}

}  // namespace wakerom::pipeline
