/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#pragma once

// Experiment orchestration. Every stage reads its inputs from the run
// directory, writes its artifacts there and records itself in manifest.json,
// so stages can run as separate processes.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "wakerom/adapt.hpp"
#include "wakerom/metrics.hpp"
#include "wakerom/rom.hpp"
#include "wakerom/synthflow.hpp"

namespace wakerom::pipeline {

struct Seeds {
  std::uint64_t train = 1;
  std::uint64_t forecast = 7;
  std::uint64_t observation = 99;
  std::uint64_t finetune = 5;
  std::uint64_t ks = 3;
};

struct FinetuneConfig {
  std::string mode = "vae_only_da";
  std::size_t epochs = 30;
  double learning_rate = 5e-4;
  double final_lr_fraction = 0.05;
  double replay_fraction = 0.5;

  adapt::RetrainMode retrain_mode() const;
};

struct PipelineConfig {
  synthflow::FlowConfig flow;
  rom::RomHyper rom;
  std::vector<double> xi_train{90.0, 120.0};
  std::vector<double> xi_eval{80.0, 90.0, 100.0, 110.0, 120.0, 130.0, 140.0};
  double xi_target = 140.0;  ///< out-of-sample value for sensing, assimilation and fine-tuning
  std::size_t sensors = 16;
  double epsilon = 1e-4;  ///< observation noise variance in normalized units
  std::size_t ensemble = 32;
  std::size_t ks_stride = 10;  ///< Gaussianity test on every k-th forecast time
  FinetuneConfig finetune;
  Seeds seeds;
  std::string output_dir = "run";

  /// Throws ConfigError naming the dotted field path.
  void validate() const;
  /// rom with state_dim taken from the flow grid.
  rom::RomHyper effective_rom() const;
  /// xi_eval plus xi_target when it is missing.
  std::vector<double> eval_values() const;
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
void from_json(const nlohmann::json& j, PipelineConfig& c);

/// Reads a JSON config file; a missing path yields the defaults.
PipelineConfig load_config(const std::filesystem::path& path);

/// Sets one dotted key ("rom.epochs") to a value parsed as JSON, falling back
/// to a plain string. Unknown keys throw ConfigError.
void apply_override(PipelineConfig& config, const std::string& dotted_key, const std::string& value);

/// FNV-1a of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const PipelineConfig& config);

/// output_dir, resolved against $WAKEROM_OUTPUT_ROOT when relative.
std::filesystem::path run_directory(const PipelineConfig& config);

extern const std::vector<std::string> kStages;

/// Energy signal predicted by an ensemble: per time, the member average of
/// the spatially summed kinetic energy.
std::vector<double> ensemble_energy(const rom::EnsembleForecast& forecast);

/// Ensemble started from the first lookback held-out snapshots and run over
/// the remaining ones, which form the truth.
struct HeldOutForecast {
  Tensor truth;  ///< [T, m]
  rom::EnsembleForecast forecast;
};

HeldOutForecast forecast_held_out(const rom::RomModel& model, const synthflow::SnapshotSet& test,
                                  std::size_t members, std::uint64_t seed);

/// Per-parameter evaluation of a model against held-out snapshots.
struct Evaluation {
  double xi = 0.0;
  double w2 = 0.0;        ///< between ensemble_energy and the true energy signal
  double uq = 0.0;        ///< uq_scalar
  double rel_l1 = 0.0;    ///< ensemble mean vs truth, percent
  double recon_l1 = 0.0;  ///< decode(encode truth) vs truth, percent
  std::vector<double> energy_truth;
  std::vector<double> energy_pred;
};

Evaluation evaluate_forecast(const rom::RomModel& model, const HeldOutForecast& run);
Evaluation evaluate_model(const rom::RomModel& model, const synthflow::SnapshotSet& test, std::size_t members,
                          std::uint64_t seed);

struct KsSummary {
  std::size_t tested = 0;
  std::size_t not_rejected = 0;
  std::size_t degenerate = 0;
  double fraction() const { return tested ? double(not_rejected) / double(tested) : 0.0; }
};

/// KS Gaussianity of the members at every state component and every
/// `stride`-th time. The null table must match the member count.
KsSummary ks_sweep(const rom::EnsembleForecast& forecast, std::size_t stride, const metrics::KsNull& null,
                   double alpha = 0.05);

using LogFn = std::function<void(const std::string&)>;

/// Runs one stage; throws ConfigError for unknown stages or missing inputs.
void run_stage(const PipelineConfig& config, const std::string& stage, const LogFn& log = {});

/// All stages in order.
void run_all(const PipelineConfig& config, const LogFn& log = {});

}  // namespace wakerom::pipeline
