/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#include <cmath>
#include <sstream>

#include "doctest.h"
#include "rom_fixtures.hpp"
#include "oracles.hpp"
#include "test_util.hpp"
#include "wakerom/adapt.hpp"
#include "wakerom/error.hpp"
#include "wakerom/metrics.hpp"

using namespace wakerom;
using namespace wakerom::adapt;
using namespace romfix;

using oracle::objective;
using oracle::coordinate_descent;
using oracle::random_spd;

namespace {

enkf::AnalysisResult random_analysis(std::size_t T, std::size_t N, const RomModel& model, Rng& rng,
                                     double spread = 0.3) {
  const std::size_t m = model.hyper.state_dim;
  Tensor samples({T, N, m});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < m; ++j)
        samples[(t * N + i) * m + j] = 1.0 + 0.1 * double(j) + std::sin(0.3 * double(t) + double(j)) +
                                       spread * rng.normal();
  auto stats = rom::ensemble_from_samples(0.0, std::move(samples));
  enkf::AnalysisResult r;
  r.samples = std::move(stats.samples);
  r.mean = std::move(stats.mean);
  r.variance = std::move(stats.variance);
  r.epsilon = 1e-4;
  r.n_obs = 2;
  return r;
}

}  // namespace

TEST_CASE("diagonal optimum of the gaussian kl") {
  Tensor diag({3, 3}, {2.0, 0, 0, 0, 0.5, 0, 0, 0, 7.0});
  CHECK(kl_diag_optimum(diag) == std::vector<double>{2.0, 0.5, 7.0});

  const double s1 = 1.3, s2 = 0.4, rho = 0.9;
  Tensor corr({2, 2}, {s1 * s1, rho * s1 * s2, rho * s1 * s2, s2 * s2});
  auto l = kl_diag_optimum(corr);
  CHECK(l[0] == doctest::Approx(s1 * s1).epsilon(1e-15));
  CHECK(l[1] == doctest::Approx(s2 * s2).epsilon(1e-15));

  CHECK_THROWS_AS(kl_diag_optimum(Tensor({2, 2}, {1.0, 2.0, 2.0, 1.0})), ContractError);
  CHECK_THROWS_AS(kl_diag_optimum(Tensor({2, 2}, {1.0, 0.1, 0.2, 1.0})), ContractError);
  CHECK_THROWS_AS(kl_diag_optimum(Tensor({2, 3})), ShapeError);
}

TEST_CASE("numerical minimizer of the kl objective agrees with the diagonal") {
  Rng rng(41);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t p = 1 + rng.below(6);
    Tensor s = random_spd(p, rng);
    const auto want = kl_diag_optimum(s);
    const auto got = coordinate_descent(s);
    for (std::size_t i = 0; i < p; ++i)
      worst = std::max(worst, std::abs(got[i] - want[i]) / std::max(1.0, want[i]));
    CHECK(kl_objective(want, s) == doctest::Approx(objective(want, s)).epsilon(1e-14));
  }
  INFO("worst " << worst);
  CHECK(worst < 1e-6);
}

TEST_CASE("optimum beats every other diagonal in full kl divergence") {
  Rng rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t p = 1 + rng.below(6);
    Tensor s = random_spd(p, rng);
    std::vector<double> zero(p, 0.0);
    const auto best = kl_diag_optimum(s);
    std::vector<double> other(p);
    for (std::size_t i = 0; i < p; ++i) other[i] = best[i] * std::exp(0.5 * rng.normal());
    CHECK(metrics::kl_gauss(zero, s, zero, best) <= metrics::kl_gauss(zero, s, zero, other));
  }
}

TEST_CASE("optimum ignores off-diagonal structure") {
  Rng rng(43);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t p = 2 + rng.below(5);
    Tensor s = random_spd(p, rng);
    // Shrinking the off-diagonal entries keeps the diagonal and positive
    // definiteness (a convex mix with diag(s)).
    Tensor t = s;
    const double w = rng.uniform();
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < p; ++j)
        if (i != j) t(i, j) *= w;
    CHECK(kl_diag_optimum(t) == kl_diag_optimum(s));
  }
}

TEST_CASE("kl objective is locally convex at the optimum") {
  Rng rng(44);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t p = 1 + rng.below(6);
    Tensor s = random_spd(p, rng);
    const auto best = kl_diag_optimum(s);
    const double f0 = kl_objective(best, s);
    for (std::size_t i = 0; i < p; ++i)
      for (double rel : {1e-3, 1e-2})
        for (double sign : {-1.0, 1.0}) {
          auto l = best;
          l[i] += sign * rel * best[i];
          CHECK(kl_objective(l, s) > f0);
        }
  }
}

TEST_CASE("retrain mode consistency") {
  CHECK_NOTHROW(RetrainMode::for_variant(RetrainVariant::full).validate());
  CHECK_NOTHROW(RetrainMode::for_variant(RetrainVariant::vae_only).validate());
  CHECK_NOTHROW(RetrainMode::for_variant(RetrainVariant::vae_only_da).validate());
  RetrainMode bad = RetrainMode::for_variant(RetrainVariant::vae_only);
  bad.source = DataSource::analysis_mean;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = RetrainMode::for_variant(RetrainVariant::vae_only_da);
  bad.source = DataSource::truth;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(parse_variant("vae_only_da") == RetrainVariant::vae_only_da);
  CHECK(to_string(RetrainVariant::full) == "full");
  CHECK_THROWS_AS(parse_variant("encoder"), ConfigError);
}

TEST_CASE("finetune freezing and identity") {
  std::vector<TrainingSeries> corpus{toy_series(90, 30, 12), toy_series(120, 30, 12, 0.4)};
  const RomModel base = mini_model(45, corpus);
  const TrainingSeries fresh = toy_series(140, 30, 12, 1.1);

  SUBCASE("zero epochs change nothing") {
    for (auto v : {RetrainVariant::full, RetrainVariant::vae_only}) {
      auto mode = RetrainMode::for_variant(v);
      mode.epochs = 0;
      Rng rng(1);
      auto r = finetune(base, mode, fresh, corpus, rng);
      CHECK(same_params(all_params(r.model), all_params(base)));
    }
  }

  SUBCASE("vae_only keeps the transformer bytes") {
    auto mode = RetrainMode::for_variant(RetrainVariant::vae_only);
    mode.epochs = 3;
    Rng rng(2);
    auto r = finetune(base, mode, fresh, corpus, rng);
    CHECK(same_params(r.model.transformer, base.transformer));
    CHECK_FALSE(same_params(r.model.encoder, base.encoder));
    CHECK_FALSE(same_params(r.model.decoder, base.decoder));
    CHECK_FALSE(r.model.frozen.transformer);
    CHECK(r.report.steps > 0);
  }

  SUBCASE("full retraining moves the transformer") {
    auto mode = RetrainMode::for_variant(RetrainVariant::full);
    mode.epochs = 3;
    Rng rng(3);
    auto r = finetune(base, mode, fresh, corpus, rng);
    CHECK_FALSE(same_params(r.model.transformer, base.transformer));
  }

  SUBCASE("vae_only_da trains on analysis means") {
    Rng data_rng(4);
    auto analysis = random_analysis(30, 8, base, data_rng);
    auto mode = RetrainMode::for_variant(RetrainVariant::vae_only_da);
    mode.epochs = 2;
    Rng rng(5);
    auto r = finetune(base, mode, analysis, 140.0, corpus, rng);
    CHECK(same_params(r.model.transformer, base.transformer));
    CHECK_FALSE(same_params(r.model.encoder, base.encoder));
    // Same as handing the means over directly.
    Rng rng2(5);
    auto direct = finetune(base, mode, TrainingSeries{140.0, analysis.mean}, corpus, rng2);
    CHECK(same_params(all_params(direct.model), all_params(r.model)));

    Rng rng3(6);
    CHECK_THROWS_AS(finetune(base, RetrainMode::for_variant(RetrainVariant::vae_only), analysis, 140.0, corpus, rng3),
                    ConfigError);
  }
}

TEST_CASE("second moment check against a two-pass oracle") {
  std::vector<TrainingSeries> corpus{toy_series(90, 30, 12), toy_series(120, 30, 12, 0.4)};
  const RomModel model = mini_model(46, corpus);
  Rng rng(47);
  const std::size_t T = 5, N = 9, m = 12, p = model.hyper.latent;
  auto analysis = random_analysis(T, N, model, rng);
  auto rep = second_moment_check(model, analysis, 130.0);
  REQUIRE(rep.lambda_vae.dims() == Dims{T, p});
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> mean_state(analysis.mean.row(t).begin(), analysis.mean.row(t).end());
    const auto g = rom::encode(model, mean_state, 130.0);
    std::vector<std::vector<double>> mu;
    for (std::size_t i = 0; i < N; ++i) {
      std::vector<double> x(m);
      for (std::size_t j = 0; j < m; ++j) x[j] = analysis.samples[(t * N + i) * m + j];
      mu.push_back(rom::encode(model, x, 130.0).mean);
    }
    for (std::size_t k = 0; k < p; ++k) {
      double avg = 0.0;
      for (auto& v : mu) avg += v[k];
      avg /= double(N);
      double var = 0.0;
      for (auto& v : mu) var += (v[k] - avg) * (v[k] - avg);
      var /= double(N - 1);
      const double lam = std::exp(g.logvar[k]);
      CHECK(std::abs(rep.sigma_ens(t, k) - var) < 1e-12);
      CHECK(std::abs(rep.lambda_vae(t, k) - lam) < 1e-12 * std::max(1.0, lam));
      CHECK(std::abs(rep.rel_discrepancy(t, k) - std::abs(lam - var) / var) < 1e-12 * std::max(1.0, lam / var));
    }
  }
  for (std::size_t k = 0; k < p; ++k) {
    std::vector<double> col;
    for (std::size_t t = 0; t < T; ++t) col.push_back(rep.rel_discrepancy(t, k));
    CHECK(rep.time_median[k] == testutil::median(col));
  }

  auto flat = random_analysis(T, N, model, rng, 0.0);
  auto zero = second_moment_check(model, flat, 130.0);
  for (double v : zero.sigma_ens.data()) CHECK(v == 0.0);
  for (double v : zero.lambda_vae.data()) CHECK(v > 0.0);

  auto few = random_analysis(T, 7, model, rng);
  CHECK_THROWS_AS(second_moment_check(model, few, 130.0), ContractError);

  std::ostringstream os;
  write_moment_csv(os, rep);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  CHECK(line == "t,component,lambda_vae,sigma_ens,rel_discrepancy");
  std::size_t rows = 0;
  while (std::getline(is, line)) ++rows;
  CHECK(rows == T * p);
}
