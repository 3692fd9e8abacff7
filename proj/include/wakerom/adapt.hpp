/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#pragma once

// Adapting a trained model to a new parameter value: retraining everything,
// only the autoencoder, or only the autoencoder against assimilated states,
// plus the check that the encoder variance tracks the analysis spread.

#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "wakerom/enkf.hpp"
#include "wakerom/rom.hpp"

namespace wakerom::adapt {

enum class RetrainVariant { full, vae_only, vae_only_da };
enum class DataSource { truth, analysis_mean };

std::string to_string(RetrainVariant v);
/// Throws ConfigError for unknown names.
RetrainVariant parse_variant(const std::string& name);

struct RetrainMode {
  RetrainVariant variant = RetrainVariant::vae_only_da;
  DataSource source = DataSource::analysis_mean;
  std::size_t epochs = 30;
  double learning_rate = 5e-4;
  /// Cosine decay target as a fraction of learning_rate; 1 keeps it constant.
  double final_lr_fraction = 0.05;
  /// Share of every batch drawn from the original corpus.
  double replay_fraction = 0.5;

  /// vae_only_da needs analysis means, the other variants simulated truth.
  void validate() const;
  /// Default source for a variant.
  static RetrainMode for_variant(RetrainVariant v);
};

struct FinetuneResult {
  rom::RomModel model;
  rom::TrainReport report;
};

/// Retrains a copy of `model` on `new_data` mixed with `replay`. The
/// vae_only variants freeze the transformer for the run; the returned model
/// carries the input's freeze flags. Normalization statistics are kept.
FinetuneResult finetune(const rom::RomModel& model, const RetrainMode& mode, const rom::TrainingSeries& new_data,
                        std::span<const rom::TrainingSeries> replay, Rng& rng,
                        const rom::ProgressFn& progress = {});

/// Same, with the analysis means at `xi` as the new series.
FinetuneResult finetune(const rom::RomModel& model, const RetrainMode& mode, const enkf::AnalysisResult& analysis,
                        double xi, std::span<const rom::TrainingSeries> replay, Rng& rng,
                        const rom::ProgressFn& progress = {});

/// Minimizer over positive diagonals of KL(N(0, sigma) || N(0, diag(lambda))),
/// which is diag(sigma). Throws ContractError unless sigma is SPD.
std::vector<double> kl_diag_optimum(const Tensor& sigma);

/// f(lambda) = sum_i log lambda_i + sigma_ii / lambda_i, equal to twice the
/// KL divergence up to terms independent of lambda.
double kl_objective(std::span<const double> lambda, const Tensor& sigma);

/// Per time and latent component: the encoder variance exp(logvar) at the
/// analysis mean, the variance (N - 1) of the encoded means of the analysis
/// members, and |lambda - sigma| / sigma (0 when both vanish, infinite when
/// only sigma does).
struct MomentReport {
  Tensor lambda_vae;          ///< [T, latent]
  Tensor sigma_ens;           ///< [T, latent]
  Tensor rel_discrepancy;     ///< [T, latent]
  std::vector<double> time_mean;    ///< per component
  std::vector<double> time_median;  ///< per component
};

/// Requires at least 8 analysis members.
MomentReport second_moment_check(const rom::RomModel& model, const enkf::AnalysisResult& analysis, double xi);

/// "t,component,lambda_vae,sigma_ens,rel_discrepancy" rows.
void write_moment_csv(std::ostream& os, const MomentReport& report);

}  // namespace wakerom::adapt
