/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#pragma once

// Ensemble Kalman analysis with the influence-function form of the gain:
// P^f H^T is built from ensemble anomalies, never from the full covariance.
// Every member is updated with the same observation (no perturbed
// observations, inflation or localization), so the analysis spread is
// typically underestimated.

#include <filesystem>
#include <span>

#include "wakerom/rom.hpp"
#include "wakerom/sensing.hpp"
#include "wakerom/tensor.hpp"

namespace wakerom::enkf {

/// Sensor readings [T, n_obs] with observation noise R = epsilon * I.
struct ObservationSeries {
  Tensor y;
  sensing::SensorLayout layout;
  double epsilon = 1e-4;

  void validate() const;
};

struct AnalysisResult {
  Tensor samples;   ///< [T, N, m]
  Tensor mean;      ///< [T, m]
  Tensor variance;  ///< [T, m], N - 1 normalization
  double epsilon = 0.0;
  std::size_t n_obs = 0;

  std::size_t steps() const { return samples.dims().at(0); }
  std::size_t members() const { return samples.dims().at(1); }
  std::size_t dim() const { return samples.dims().at(2); }
};

/// P^f H^T = (1/(N-1)) sum_i (psi_i - mean)^T (H psi_i - H mean), [m, n_obs].
/// `ensemble` is [N, m].
Tensor influence(const Tensor& ensemble, const sensing::SensorLayout& layout);

/// H P^f H^T, [n_obs, n_obs], exactly symmetric.
Tensor observed_covariance(const Tensor& ensemble, const sensing::SensorLayout& layout);

/// K = P^f H^T (H P^f H^T + eps I)^-1 through a Cholesky solve. If the
/// factorization fails, 1e-12 * trace / n is added to the diagonal once;
/// a second failure throws NumericError quoting the smallest eigenvalue.
Tensor kalman_gain(const Tensor& pfht, const Tensor& hpfht, double epsilon);

/// psi_i + K (y - H psi_i) for every member.
Tensor analysis_step(const Tensor& ensemble, std::span<const double> y, const sensing::SensorLayout& layout,
                     double epsilon);

/// Independent analysis at every time of a [T, N, m] forecast.
AnalysisResult assimilate(const Tensor& forecast_samples, const ObservationSeries& obs);
AnalysisResult assimilate(const rom::EnsembleForecast& forecast, const ObservationSeries& obs);

/// samples.rmx, mean.rmx, variance.rmx and analysis.json in `dir`.
void save_analysis(const std::filesystem::path& dir, const AnalysisResult& result);
AnalysisResult load_analysis(const std::filesystem::path& dir);

}  // namespace wakerom::enkf
