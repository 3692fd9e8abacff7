/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#include "wakerom/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "wakerom/error.hpp"
#include "wakerom/linalg.hpp"

namespace wakerom::metrics {

namespace {

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite sample");
  }
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace

double wasserstein2(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw ContractError("wasserstein2: empty sample set");
  require_finite(a, "wasserstein2");
  require_finite(b, "wasserstein2");
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  const std::size_t na = sa.size(), nb = sb.size();
  double acc = 0.0;
  if (na == nb) {
    for (std::size_t i = 0; i < na; ++i) acc += (sa[i] - sb[i]) * (sa[i] - sb[i]);
    return std::sqrt(acc / double(na));
  }
  // Quantile levels i/na and j/nb compared as integers i*nb vs j*na.
  std::size_t i = 0, j = 0;
  std::uint64_t level = 0;
  const std::uint64_t total = std::uint64_t(na) * nb;
  while (level < total) {
    const std::uint64_t next_a = std::uint64_t(i + 1) * nb, next_b = std::uint64_t(j + 1) * na;
    const std::uint64_t next = std::min(next_a, next_b);
    const double d = sa[i] - sb[j];
    acc += d * d * double(next - level);
    level = next;
    if (next_a == next) ++i;
    if (next_b == next) ++j;
  }
  return std::sqrt(acc / double(total));
}

double relative_error(std::span<const double> pred, std::span<const double> truth, Norm norm) {
  if (pred.size() != truth.size()) {
    throw ShapeError("relative_error: " + std::to_string(pred.size()) + " vs " + std::to_string(truth.size()) +
                     " entries");
  }
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - truth[i];
    if (norm == Norm::L1) {
      num += std::abs(d);
      den += std::abs(truth[i]);
    } else {
      num += d * d;
      den += truth[i] * truth[i];
    }
  }
  if (norm == Norm::L2) {
    num = std::sqrt(num);
    den = std::sqrt(den);
  }
  if (!(den > 0.0)) throw ContractError("relative_error: reference has zero norm");
  return 100.0 * num / den;
}

double relative_error(const Tensor& pred, const Tensor& truth, Norm norm) {
  if (pred.dims() != truth.dims()) {
    throw ShapeError("relative_error: " + dims_to_string(pred.dims()) + " vs " + dims_to_string(truth.dims()));
  }
  return relative_error(pred.data(), truth.data(), norm);
}

double ks_statistic(std::span<const double> samples) {
  const std::size_t n = samples.size();
  if (n < 2) throw ContractError("ks_statistic: need at least two samples");
  std::vector<double> x(samples.begin(), samples.end());
  std::sort(x.begin(), x.end());
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / double(n);
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / double(n - 1));
  if (!(sd > 0.0)) return 0.0;
  double d = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double f = normal_cdf((x[i] - mean) / sd);
    d = std::max({d, double(i + 1) / double(n) - f, f - double(i) / double(n)});
  }
  return d;
}

KsNull::KsNull(std::size_t n, Rng& rng, std::size_t replicates) : n_(n) {
  if (n < 2) throw ContractError("KsNull: need at least two samples");
  if (replicates < 1) throw ContractError("KsNull: need at least one replicate");
  std::vector<double> draw(n);
  sorted_.reserve(replicates);
  for (std::size_t r = 0; r < replicates; ++r) {
    rng.fill_normal(draw);
    sorted_.push_back(ks_statistic(draw));
  }
  std::sort(sorted_.begin(), sorted_.end());
}

double KsNull::p_value(double statistic) const {
  const auto at_least = std::size_t(sorted_.end() - std::lower_bound(sorted_.begin(), sorted_.end(), statistic));
  return double(1 + at_least) / double(1 + sorted_.size());
}

KsResult KsNull::test(std::span<const double> samples, double alpha) const {
  if (samples.size() != n_) {
    throw ShapeError("ks test: null built for " + std::to_string(n_) + " samples, got " +
                     std::to_string(samples.size()));
  }
  require_finite(samples, "ks test");
  KsResult r;
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / double(n_);
  double ss = 0.0;
  for (double v : samples) ss += (v - mean) * (v - mean);
  if (!(ss > 0.0)) {
    r.degenerate = true;
    r.reject = std::any_of(samples.begin(), samples.end(), [&](double v) { return v != mean; });
    r.p_value = r.reject ? 0.0 : 1.0;
    return r;
  }
  r.statistic = ks_statistic(samples);
  r.p_value = p_value(r.statistic);
  r.reject = r.p_value <= alpha;
  return r;
}

KsResult ks_gaussianity(std::span<const double> samples, Rng& rng, double alpha) {
  if (samples.size() < 8) throw ContractError("ks_gaussianity: need at least 8 samples");
  return KsNull(samples.size(), rng).test(samples, alpha);
}

double kl_gauss(std::span<const double> mu1, const Tensor& sigma1, std::span<const double> mu2,
                std::span<const double> lambda2) {
  const std::size_t p = mu1.size();
  if (sigma1.rank() != 2 || sigma1.rows() != p || sigma1.cols() != p || mu2.size() != p || lambda2.size() != p) {
    throw ShapeError("kl_gauss: inconsistent dimensions");
  }
  auto lower = linalg::cholesky(sigma1);
  if (!lower) throw ContractError("kl_gauss: covariance is not positive definite");
  double logdet2 = 0.0, trace = 0.0, quad = 0.0;
  for (std::size_t i = 0; i < p; ++i) {
    if (!(lambda2[i] > 0.0)) throw ContractError("kl_gauss: diagonal entries must be positive");
    logdet2 += std::log(lambda2[i]);
    trace += sigma1(i, i) / lambda2[i];
    quad += (mu2[i] - mu1[i]) * (mu2[i] - mu1[i]) / lambda2[i];
  }
  return std::max(0.0, 0.5 * (logdet2 - linalg::logdet_spd(*lower) - double(p) + trace + quad));
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * double(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

std::optional<double> rank_correlation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("rank_correlation: lengths differ");
  if (a.size() < 3) throw ContractError("rank_correlation: need at least 3 pairs");
  require_finite(a, "rank_correlation");
  require_finite(b, "rank_correlation");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double mean = 0.5 * double(a.size() + 1);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - mean) * (rb[i] - mean);
    saa += (ra[i] - mean) * (ra[i] - mean);
    sbb += (rb[i] - mean) * (rb[i] - mean);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

void write_csv(std::ostream& os, std::span<const MetricRow> rows) {
  os << "metric,xi,value\n";
  char buf[64];
  for (const auto& r : rows) {
    os << r.metric << ',';
    std::snprintf(buf, sizeof buf, "%.17g,", r.xi);
    os << buf;
    std::snprintf(buf, sizeof buf, "%.17g\n", r.value);
    os << buf;
  }
}

}  // namespace wakerom::metrics
