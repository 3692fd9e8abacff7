/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "wakerom/tensor.hpp"

namespace wakerom::synthflow {

/// Parameterized wake surrogate: a Hopf normal form
///   dr/dt = mu r - r^3,  dtheta/dt = omega,
///   mu = alpha (xi - xi_c),  omega = omega0 + omega1 (xi - xi_c),
/// embedded into a two-component velocity field on an (nx, ny) grid over
/// x in [0, lx], y in [-ly/2, ly/2].
struct FlowConfig {
  double xi = 100.0;
  double xi_c = 60.0;
  double alpha = 0.005;
  double omega0 = 0.8;
  double omega1 = 0.005;
  double kappa = 2.0;
  double x0 = 3.0;
  double sigma_x = 2.5;
  double sigma_y = 1.2;
  std::size_t nx = 32;
  std::size_t ny = 24;
  double lx = 8.0;
  double ly = 6.0;
  double dt = 0.05;
  std::size_t steps = 800;  ///< snapshot count T
  double r0 = 1e-3;

  double growth_rate() const { return alpha * (xi - xi_c); }
  double frequency() const { return omega0 + omega1 * (xi - xi_c); }
  std::size_t grid_points() const { return nx * ny; }
  std::size_t state_dim() const { return 2 * nx * ny; }

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Spatial structures of the field, each of length nx*ny. Grid point (ix, iy)
/// sits at flat index iy * nx + ix.
struct FlowModes {
  std::vector<double> x, y;  ///< coordinates per flat index
  std::vector<double> envelope;
  std::vector<double> base;  ///< U_b
  std::vector<double> phi1, phi2, phi3;
  std::vector<double> psi1, psi2;
};

FlowModes flow_modes(const FlowConfig& config);

struct HopfTrajectory {
  std::vector<double> times;
  std::vector<double> radius;
  std::vector<double> phase;
};

/// Fixed-step classical RK4 from (r0, 0), one sample per snapshot time k*dt.
HopfTrajectory integrate_hopf(const FlowConfig& config);

/// Time-ordered states of one parameter value: row k is the snapshot at
/// times[k], laid out as the u-field then the v-field.
struct SnapshotSet {
  double xi = 0.0;
  std::vector<double> times;
  Tensor states;  ///< [T, m]

  std::size_t count() const { return states.rows(); }
  std::size_t dim() const { return states.cols(); }
};

/// Deterministic; throws NumericError with the step index if the state
/// stops being finite.
SnapshotSet simulate(const FlowConfig& config);

/// Upper bound on the spatially summed kinetic energy of any snapshot, from
/// the largest radius the trajectory can reach.
double energy_bound(const FlowConfig& config);

struct EnergySignal {
  double xi = 0.0;
  std::vector<double> values;
};

/// Per snapshot, the sum over grid points of u^2 + v^2.
EnergySignal kinetic_energy(const SnapshotSet& snapshots);
std::vector<double> kinetic_energy(const Tensor& states);

/// Even rows go to the first set, odd rows to the second, order preserved.
std::pair<SnapshotSet, SnapshotSet> split_even_odd(const SnapshotSet& snapshots);

struct CorpusEntry {
  double xi = 0.0;
  std::string path;  ///< relative to the corpus directory
  Dims dims;
  double dt = 0.0;
  std::string split;  ///< "train" or "eval"
};

struct Corpus {
  std::filesystem::path dir;
  FlowConfig flow;
  std::vector<CorpusEntry> entries;

  std::vector<CorpusEntry> by_split(const std::string& split) const;
  SnapshotSet load(const CorpusEntry& entry) const;
};

/// Simulates each distinct xi once, writes one RMX1 file per value and a
/// `corpus.json` manifest with one entry per (xi, split) pair.
Corpus build_corpus(const std::vector<double>& xi_train, const std::vector<double>& xi_eval,
                    const FlowConfig& flow_template, const std::filesystem::path& dir);

Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace wakerom::synthflow
