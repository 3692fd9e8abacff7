/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#include "wakerom/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "wakerom/error.hpp"
#include "wakerom/linalg.hpp"

namespace wakerom::adapt {

std::string to_string(RetrainVariant v) {
  switch (v) {
    case RetrainVariant::full:
      return "full";
    case RetrainVariant::vae_only:
      return "vae_only";
    case RetrainVariant::vae_only_da:
      return "vae_only_da";
  }
  return "unknown";
}

RetrainVariant parse_variant(const std::string& name) {
  if (name == "full") return RetrainVariant::full;
  if (name == "vae_only") return RetrainVariant::vae_only;
  if (name == "vae_only_da") return RetrainVariant::vae_only_da;
  throw ConfigError("finetune.mode: unknown variant '" + name + "' (full, vae_only, vae_only_da)");
}

void RetrainMode::validate() const {
  const bool da = variant == RetrainVariant::vae_only_da;
  if (da != (source == DataSource::analysis_mean)) {
    throw ConfigError("finetune.mode: " + to_string(variant) + " cannot train on " +
                      (source == DataSource::analysis_mean ? "analysis means" : "simulated truth"));
  }
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("finetune.learning_rate: must be positive");
  }
  if (!(replay_fraction >= 0.0 && replay_fraction < 1.0)) {
    throw ConfigError("finetune.replay_fraction: must lie in [0, 1)");
  }
}

RetrainMode RetrainMode::for_variant(RetrainVariant v) {
  RetrainMode m;
  m.variant = v;
  m.source = v == RetrainVariant::vae_only_da ? DataSource::analysis_mean : DataSource::truth;
  return m;
}

FinetuneResult finetune(const rom::RomModel& model, const RetrainMode& mode, const rom::TrainingSeries& new_data,
                        std::span<const rom::TrainingSeries> replay, Rng& rng, const rom::ProgressFn& progress) {
  mode.validate();
  FinetuneResult out{model, {}};
  const auto flags = model.frozen;
  if (mode.variant != RetrainVariant::full) out.model.frozen.transformer = true;
  rom::TrainSchedule sch;
  sch.epochs = mode.epochs;
  sch.learning_rate = mode.learning_rate;
  sch.final_lr_fraction = mode.final_lr_fraction;
  sch.batch = model.hyper.batch;
  sch.replay_fraction = mode.replay_fraction;
  out.report = rom::train(out.model, std::span<const rom::TrainingSeries>(&new_data, 1), replay, sch, rng, progress);
  out.model.frozen = flags;
  return out;
}

FinetuneResult finetune(const rom::RomModel& model, const RetrainMode& mode, const enkf::AnalysisResult& analysis,
                        double xi, std::span<const rom::TrainingSeries> replay, Rng& rng,
                        const rom::ProgressFn& progress) {
  if (mode.source != DataSource::analysis_mean) {
    throw ConfigError("finetune.mode: " + to_string(mode.variant) + " cannot train on analysis means");
  }
  return finetune(model, mode, rom::TrainingSeries{xi, analysis.mean}, replay, rng, progress);
}

namespace {

void require_spd(const Tensor& sigma, const char* what) {
  if (sigma.rank() != 2 || sigma.rows() != sigma.cols() || sigma.rows() == 0) {
    throw ShapeError(std::string(what) + ": expected a square matrix, got " + dims_to_string(sigma.dims()));
  }
  const std::size_t p = sigma.rows();
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (std::abs(sigma(i, j) - sigma(j, i)) > 1e-12 * (std::abs(sigma(i, j)) + std::abs(sigma(j, i)) + 1e-300)) {
        throw ContractError(std::string(what) + ": matrix is not symmetric");
      }
  if (!linalg::cholesky(sigma)) throw ContractError(std::string(what) + ": matrix is not positive definite");
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<double> kl_diag_optimum(const Tensor& sigma) {
  require_spd(sigma, "kl_diag_optimum");
  std::vector<double> out(sigma.rows());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigma(i, i);
  return out;
}

double kl_objective(std::span<const double> lambda, const Tensor& sigma) {
  if (sigma.rank() != 2 || sigma.rows() != lambda.size() || sigma.cols() != lambda.size()) {
    throw ShapeError("kl_objective: " + std::to_string(lambda.size()) + " entries vs " + dims_to_string(sigma.dims()));
  }
  double f = 0.0;
  for (std::size_t i = 0; i < lambda.size(); ++i) {
    if (!(lambda[i] > 0.0)) throw ContractError("kl_objective: entries must be positive");
    f += std::log(lambda[i]) + sigma(i, i) / lambda[i];
  }
  return f;
}

MomentReport second_moment_check(const rom::RomModel& model, const enkf::AnalysisResult& analysis, double xi) {
  if (analysis.samples.rank() != 3) throw ShapeError("second_moment_check: analysis samples must be [T, N, m]");
  const std::size_t T = analysis.steps(), N = analysis.members(), m = analysis.dim();
  if (N < 8) throw ContractError("second_moment_check: need at least 8 members, got " + std::to_string(N));
  if (m != model.hyper.state_dim) throw ShapeError("second_moment_check: state size differs from the model");
  const std::size_t p = model.hyper.latent;

  MomentReport r;
  r.lambda_vae = Tensor({T, p});
  r.sigma_ens = Tensor({T, p});
  r.rel_discrepancy = Tensor({T, p});
  const auto at_mean = rom::encode_batch(model, analysis.mean, xi);
  for (std::size_t t = 0; t < T; ++t) {
    // One row at a time: batched products may round identical rows
    // differently, and a collapsed ensemble must give exactly zero spread.
    Tensor mu({N, p});
    for (std::size_t i = 0; i < N; ++i) {
      const auto g = rom::encode(model, analysis.samples.data().subspan((t * N + i) * m, m), xi);
      std::copy(g.mean.begin(), g.mean.end(), mu.row(i).begin());
    }
    for (std::size_t k = 0; k < p; ++k) {
      // Shifted by the first member, so equal members give exactly zero.
      double mean = 0.0;
      for (std::size_t i = 0; i < N; ++i) mean += mu(i, k) - mu(0, k);
      mean /= double(N);
      double ss = 0.0;
      for (std::size_t i = 0; i < N; ++i) ss += (mu(i, k) - mu(0, k) - mean) * (mu(i, k) - mu(0, k) - mean);
      const double sigma = ss / double(N - 1);
      const double lambda = std::exp(at_mean.logvar(t, k));
      r.lambda_vae(t, k) = lambda;
      r.sigma_ens(t, k) = sigma;
      r.rel_discrepancy(t, k) = sigma > 0.0   ? std::abs(lambda - sigma) / sigma
                                : lambda == 0.0 ? 0.0
                                                : std::numeric_limits<double>::infinity();
    }
  }
  for (std::size_t k = 0; k < p; ++k) {
    std::vector<double> col(T);
    for (std::size_t t = 0; t < T; ++t) col[t] = r.rel_discrepancy(t, k);
    double s = 0.0;
    for (double v : col) s += v;
    r.time_mean.push_back(T ? s / double(T) : 0.0);
    r.time_median.push_back(T ? median_of(col) : 0.0);
  }
  return r;
}

void write_moment_csv(std::ostream& os, const MomentReport& r) {
  os << "t,component,lambda_vae,sigma_ens,rel_discrepancy\n";
  char buf[160];
  for (std::size_t t = 0; t < r.lambda_vae.rows(); ++t) {
    for (std::size_t k = 0; k < r.lambda_vae.cols(); ++k) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g\n", t, k, r.lambda_vae(t, k), r.sigma_ens(t, k),
                    r.rel_discrepancy(t, k));
      os << buf;
    }
  }
}

}  // namespace wakerom::adapt
