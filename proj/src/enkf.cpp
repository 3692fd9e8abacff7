/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#include "wakerom/enkf.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "wakerom/error.hpp"
#include "wakerom/linalg.hpp"

namespace wakerom::enkf {

namespace {

void check_ensemble(const Tensor& e, const sensing::SensorLayout& layout, const char* what) {
  if (e.rank() != 2 || e.cols() != layout.m) {
    throw ShapeError(std::string(what) + ": ensemble " + dims_to_string(e.dims()) + " vs layout over " +
                     std::to_string(layout.m));
  }
  if (e.rows() < 2) throw ContractError(std::string(what) + ": need at least two members");
  layout.validate();
}

// Member deviations from the ensemble mean, [N, m].
Tensor anomalies(const Tensor& e) {
  const std::size_t N = e.rows(), m = e.cols();
  std::vector<double> mean(m, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < m; ++j) mean[j] += e(i, j);
  for (auto& v : mean) v /= static_cast<double>(N);
  Tensor a({N, m});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < m; ++j) a(i, j) = e(i, j) - mean[j];
  return a;
}

}  // namespace

void ObservationSeries::validate() const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("enkf.epsilon: must be positive");
  layout.validate();
  if (y.rank() != 2 || y.cols() != layout.size()) {
    throw ShapeError("observations " + dims_to_string(y.dims()) + " vs " + std::to_string(layout.size()) + " sensors");
  }
}

Tensor influence(const Tensor& ensemble, const sensing::SensorLayout& layout) {
  check_ensemble(ensemble, layout, "influence");
  const std::size_t N = ensemble.rows(), m = ensemble.cols(), n = layout.size();
  const Tensor a = anomalies(ensemble);
  Tensor out({m, n});
  const double w = 1.0 / static_cast<double>(N - 1);
  for (std::size_t i = 0; i < N; ++i) {
    auto ai = a.row(i);
    for (std::size_t k = 0; k < n; ++k) {
      const double hk = ai[layout.indices[k]];
      for (std::size_t j = 0; j < m; ++j) out(j, k) += ai[j] * hk;
    }
  }
  for (auto& v : out.data()) v *= w;
  return out;
}

Tensor observed_covariance(const Tensor& ensemble, const sensing::SensorLayout& layout) {
  check_ensemble(ensemble, layout, "observed_covariance");
  const std::size_t N = ensemble.rows(), n = layout.size();
  const Tensor a = anomalies(ensemble);
  Tensor out({n, n});
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t l = k; l < n; ++l) {
      double s = 0.0;
      for (std::size_t i = 0; i < N; ++i) s += a(i, layout.indices[k]) * a(i, layout.indices[l]);
      out(k, l) = out(l, k) = s / static_cast<double>(N - 1);
    }
  }
  return out;
}

Tensor kalman_gain(const Tensor& pfht, const Tensor& hpfht, double epsilon) {
  if (!(epsilon > 0.0)) throw ContractError("kalman_gain: epsilon must be positive");
  if (pfht.rank() != 2 || hpfht.rank() != 2 || hpfht.rows() != hpfht.cols() || pfht.cols() != hpfht.rows()) {
    throw ShapeError("kalman_gain: " + dims_to_string(pfht.dims()) + " and " + dims_to_string(hpfht.dims()));
  }
  const std::size_t n = hpfht.rows();
  Tensor s({n, n});
  double trace = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t l = 0; l < n; ++l) s(k, l) = 0.5 * (hpfht(k, l) + hpfht(l, k));
    s(k, k) += epsilon;
    trace += s(k, k);
  }
  auto lower = linalg::cholesky(s);
  if (!lower) {
    const double jitter = 1e-12 * trace / static_cast<double>(n);
    for (std::size_t k = 0; k < n; ++k) s(k, k) += jitter;
    lower = linalg::cholesky(s);
  }
  if (!lower) {
    std::ostringstream os;
    os << "kalman_gain: innovation covariance is not positive definite (smallest eigenvalue "
       << linalg::symmetric_eigenvalues(s).front() << ")";
    throw NumericError(os.str());
  }
  // S K^T = (P^f H^T)^T
  return linalg::transpose(linalg::cholesky_solve(*lower, linalg::transpose(pfht)));
}

Tensor analysis_step(const Tensor& ensemble, std::span<const double> y, const sensing::SensorLayout& layout,
                     double epsilon) {
  check_ensemble(ensemble, layout, "analysis_step");
  if (y.size() != layout.size()) {
    throw ShapeError("analysis_step: " + std::to_string(y.size()) + " readings for " + std::to_string(layout.size()) +
                     " sensors");
  }
  const Tensor k = kalman_gain(influence(ensemble, layout), observed_covariance(ensemble, layout), epsilon);
  const std::size_t N = ensemble.rows(), m = ensemble.cols(), n = layout.size();
  Tensor out = ensemble;
  std::vector<double> innov(n);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t l = 0; l < n; ++l) innov[l] = y[l] - ensemble(i, layout.indices[l]);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t l = 0; l < n; ++l) s += k(j, l) * innov[l];
      dst[j] += s;
    }
  }
  return out;
}

AnalysisResult assimilate(const Tensor& f, const ObservationSeries& obs) {
  obs.validate();
  if (f.rank() != 3) throw ShapeError("assimilate: forecast must be [T, N, m], got " + dims_to_string(f.dims()));
  const std::size_t T = f.dims()[0], N = f.dims()[1], m = f.dims()[2];
  if (obs.y.rows() != T) {
    throw ShapeError("assimilate: " + std::to_string(obs.y.rows()) + " observation times for " + std::to_string(T) +
                     " forecast times");
  }
  if (obs.layout.m != m) throw ShapeError("assimilate: layout and forecast state sizes differ");
  Tensor samples(f.dims());
  for (std::size_t t = 0; t < T; ++t) {
    Tensor member({N, m}, std::vector<double>(f.data().begin() + static_cast<std::ptrdiff_t>(t * N * m),
                                              f.data().begin() + static_cast<std::ptrdiff_t>((t + 1) * N * m)));
    Tensor a;
    try {
      a = analysis_step(member, obs.y.row(t), obs.layout, obs.epsilon);
    } catch (const NumericError& e) {
      throw NumericError("assimilate: step t=" + std::to_string(t) + ": " + e.what());
    }
    std::copy(a.data().begin(), a.data().end(), samples.data().begin() + static_cast<std::ptrdiff_t>(t * N * m));
  }
  auto stats = rom::ensemble_from_samples(0.0, std::move(samples));
  AnalysisResult r;
  r.samples = std::move(stats.samples);
  r.mean = std::move(stats.mean);
  r.variance = std::move(stats.variance);
  r.epsilon = obs.epsilon;
  r.n_obs = obs.layout.size();
  return r;
}

AnalysisResult assimilate(const rom::EnsembleForecast& forecast, const ObservationSeries& obs) {
  return assimilate(forecast.samples, obs);
}

void save_analysis(const std::filesystem::path& dir, const AnalysisResult& r) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  save_rmx(dir / "samples.rmx", r.samples);
  save_rmx(dir / "mean.rmx", r.mean);
  save_rmx(dir / "variance.rmx", r.variance);
  nlohmann::json meta{{"epsilon", r.epsilon}, {"n_obs", r.n_obs}, {"N", r.members()}, {"T", r.steps()}};
  std::ofstream os(dir / "analysis.json");
  if (!os) throw IoError("cannot write " + (dir / "analysis.json").string());
  os << meta.dump(2) << '\n';
}

AnalysisResult load_analysis(const std::filesystem::path& dir) {
  AnalysisResult r;
  std::ifstream is(dir / "analysis.json");
  if (!is) throw IoError("cannot open " + (dir / "analysis.json").string());
  std::size_t N = 0, T = 0;
  try {
    const auto meta = nlohmann::json::parse(is);
    r.epsilon = meta.at("epsilon").get<double>();
    r.n_obs = meta.at("n_obs").get<std::size_t>();
    N = meta.at("N").get<std::size_t>();
    T = meta.at("T").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError((dir / "analysis.json").string() + ": " + e.what());
  }
  r.samples = load_rmx(dir / "samples.rmx");
  r.mean = load_rmx(dir / "mean.rmx");
  r.variance = load_rmx(dir / "variance.rmx");
  if (r.samples.rank() != 3 || r.samples.dims()[0] != T || r.samples.dims()[1] != N ||
      r.mean.dims() != Dims{T, r.samples.dims()[2]} || r.variance.dims() != r.mean.dims()) {
    throw IoError(dir.string() + ": analysis files disagree with analysis.json");
  }
  return r;
}

}  // namespace wakerom::enkf
