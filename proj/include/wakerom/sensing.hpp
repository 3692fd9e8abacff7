/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "wakerom/rng.hpp"
#include "wakerom/tensor.hpp"

namespace wakerom::sensing {

/// Leading spatial modes scaled by their singular values: psi is [m, r] and
/// x ~= psi * a for a state x of length m.
struct PodBasis {
  Tensor psi;
  std::vector<double> sigma;  ///< r values, descending
  std::vector<double> mean;   ///< subtracted snapshot mean, empty when off

  std::size_t rank() const { return sigma.size(); }
  std::size_t dim() const { return psi.rank() == 2 ? psi.rows() : 0; }
};

/// POD of a [T, m] snapshot matrix. Each mode's largest-magnitude entry is
/// made positive (first index wins ties) so the basis is reproducible.
PodBasis pod_basis(const Tensor& snapshots, std::size_t r, bool subtract_mean = false);

/// Best rank-r approximation of the snapshot rows in the span of the basis.
Tensor project(const Tensor& snapshots, const PodBasis& basis);

struct SensorLayout {
  std::size_t m = 0;
  std::vector<std::size_t> indices;

  std::size_t size() const { return indices.size(); }
  /// Throws ContractError on out-of-range or repeated indices.
  void validate() const;
};

/// Householder QR with column pivoting on a [r, m] matrix: at each step the
/// remaining column with the largest residual norm is chosen (lowest index on
/// ties). Stops after `count` pivots or when every residual vanishes.
struct PivotedQr {
  std::vector<std::size_t> pivots;
  std::vector<double> r_diag;  ///< |R_kk| of each pivot
};
PivotedQr pivoted_qr(const Tensor& a, std::size_t count);

/// First n_obs pivots of the pivoted QR of psi^T. Beyond the basis rank a new
/// pivoting round starts on the columns not yet chosen.
SensorLayout place_sensors(const PodBasis& basis, std::size_t n_obs);

/// n distinct indices drawn uniformly from [0, m).
SensorLayout random_layout(std::size_t m, std::size_t n, Rng& rng);

/// Column gather, [T, m] -> [T, n_obs].
Tensor observe(const Tensor& states, const SensorLayout& layout);

/// Full state from sensor readings: psi * argmin |(H psi) a - y|. Throws
/// ConditionError when H psi is rank deficient or its condition number
/// exceeds `max_condition`.
std::vector<double> reconstruct(std::span<const double> y, const SensorLayout& layout, const PodBasis& basis,
                                double max_condition = 1e12);
/// Row-wise reconstruction of [T, n_obs] readings.
Tensor reconstruct_series(const Tensor& y, const SensorLayout& layout, const PodBasis& basis,
                          double max_condition = 1e12);

/// JSON {"m": ..., "indices": [...]}.
void save_layout(const std::filesystem::path& path, const SensorLayout& layout);
SensorLayout load_layout(const std::filesystem::path& path);

/// psi as an RMX1 file plus a JSON sidecar (same stem, .json) holding the
/// singular values and mean.
void save_basis(const std::filesystem::path& path, const PodBasis& basis);
PodBasis load_basis(const std::filesystem::path& path);

}  // namespace wakerom::sensing
