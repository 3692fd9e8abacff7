/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "wakerom/rng.hpp"
#include "wakerom/tensor.hpp"

namespace wakerom::metrics {

/// 2-Wasserstein distance between two empirical distributions on the line.
/// Equal sizes give sqrt(mean((sort a - sort b)^2)); otherwise the squared
/// quantile difference is integrated exactly over the merged breakpoints of
/// both step quantile functions.
double wasserstein2(std::span<const double> a, std::span<const double> b);

enum class Norm { L1, L2 };

/// 100 * |pred - truth| / |truth| in the chosen entrywise norm.
double relative_error(std::span<const double> pred, std::span<const double> truth, Norm norm);
double relative_error(const Tensor& pred, const Tensor& truth, Norm norm);

struct KsResult {
  double statistic = 0.0;  ///< sup |F_emp - Phi| with fitted mean and std
  double p_value = 1.0;    ///< Monte-Carlo p-value, (1 + #null >= D) / (R + 1)
  bool reject = false;
  bool degenerate = false;  ///< sample standard deviation was zero
};

/// KS distance of a sample to the normal law with its own sample mean and
/// standard deviation (N - 1). Requires at least two samples.
double ks_statistic(std::span<const double> samples);

/// Null distribution of ks_statistic for one sample size, simulated from
/// standard normal replicates. The statistic is location-scale invariant, so
/// one table serves every fitted Gaussian of that size.
class KsNull {
 public:
  KsNull(std::size_t n, Rng& rng, std::size_t replicates = 2000);

  std::size_t size() const { return n_; }
  double p_value(double statistic) const;
  KsResult test(std::span<const double> samples, double alpha = 0.05) const;

 private:
  std::size_t n_;
  std::vector<double> sorted_;
};

/// One-shot test; builds the null from `rng`. Requires n >= 8.
KsResult ks_gaussianity(std::span<const double> samples, Rng& rng, double alpha = 0.05);

/// KL(N(mu1, sigma1) || N(mu2, diag(lambda2))).
double kl_gauss(std::span<const double> mu1, const Tensor& sigma1, std::span<const double> mu2,
                std::span<const double> lambda2);

/// Spearman correlation with average ranks for ties; nullopt when either
/// input is constant. Requires equal lengths of at least 3.
std::optional<double> rank_correlation(std::span<const double> a, std::span<const double> b);

/// Average ranks (1-based) of the entries.
std::vector<double> average_ranks(std::span<const double> v);

struct MetricRow {
  std::string metric;
  double xi = 0.0;
  double value = 0.0;
};

/// "metric,xi,value" header then one row each, values at full precision.
void write_csv(std::ostream& os, std::span<const MetricRow> rows);

}  // namespace wakerom::metrics
