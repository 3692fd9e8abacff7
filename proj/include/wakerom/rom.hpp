/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "wakerom/autodiff.hpp"
#include "wakerom/rng.hpp"
#include "wakerom/tensor.hpp"

namespace wakerom::rom {

/// Architecture and optimizer settings of the reduced-order model.
struct RomHyper {
  std::size_t state_dim = 1536;
  std::size_t latent = 4;
  std::vector<std::size_t> encoder_hidden{256, 64};
  std::vector<std::size_t> decoder_hidden{64, 256};
  std::size_t d_model = 64;
  std::size_t blocks = 1;
  std::size_t heads = 8;
  std::size_t ff_hidden = 128;
  std::size_t xi_tokens = 4;  ///< context tokens produced from the parameter
  std::size_t lookback = 9;
  std::size_t horizon = 10;
  double beta_kl = 3e-4;
  double gamma_roll = 1.0;
  double learning_rate = 1e-3;
  double final_lr_fraction = 1.0;  ///< cosine decay target, 1 = constant rate
  std::size_t epochs = 200;
  std::size_t batch = 32;  ///< windows per optimizer step
  double xi_center = 110.0;
  double xi_scale = 30.0;

  std::size_t window() const { return lookback + horizon; }
  void validate() const;
};

/// Affine feature scaling applied before the encoder and undone after the
/// decoder: normalized = (x - mean) / scale.
struct Normalization {
  std::vector<double> mean;
  std::vector<double> scale;

  Tensor normalize(const Tensor& states) const;
  Tensor denormalize(const Tensor& normalized) const;
};

struct FreezeFlags {
  bool encoder = false;
  bool decoder = false;
  bool transformer = false;
};

/// Encoder, decoder and latent propagator parameters plus everything needed
/// to apply them. Parameter names carry the prefixes "enc/", "dec/", "tf/".
struct RomModel {
  RomHyper hyper;
  ParamMap encoder;
  ParamMap decoder;
  ParamMap transformer;
  FreezeFlags frozen;
  Normalization norm;

  double normalize_xi(double xi) const { return (xi - hyper.xi_center) / hyper.xi_scale; }
};

/// One parameter value's training trajectory, [T, m] in physical units.
struct TrainingSeries {
  double xi = 0.0;
  Tensor states;
};

/// Per-feature mean; the scale is the pooled standard deviation of all
/// features, stored once per feature.
Normalization fit_normalization(std::span<const TrainingSeries> data);

RomModel init_model(const RomHyper& hyper, Normalization norm, Rng& rng);

struct LatentGaussian {
  std::vector<double> mean;
  std::vector<double> logvar;
};

/// Row-wise encoder outputs, each [n, latent].
struct LatentBatch {
  Tensor mean;
  Tensor logvar;
};

LatentGaussian encode(const RomModel& model, std::span<const double> state, double xi);
LatentBatch encode_batch(const RomModel& model, const Tensor& states, double xi);

/// z = mean + exp(logvar / 2) * n with n standard normal; components with
/// logvar < -100 return the mean exactly.
std::vector<double> reparameterize(const LatentGaussian& g, Rng& rng);

std::vector<double> decode(const RomModel& model, std::span<const double> z, double xi);
/// Decodes rows of z, [n, latent] -> [n, m] in physical units.
Tensor decode_batch(const RomModel& model, const Tensor& z, double xi);

/// Autoregressive latent rollout from a [lookback, latent] window: each
/// prediction is appended and the oldest entry dropped. Returns [steps, latent].
Tensor rollout(const RomModel& model, const Tensor& window, double xi, std::size_t steps);

/// Batched rollout of B windows stacked as [B * lookback, latent], all at the
/// same parameter. Returns [steps, B, latent].
Tensor rollout_batch(const RomModel& model, const Tensor& windows, double xi, std::size_t steps);

/// Stochastic forecast: samples [T, N, m], mean and unbiased variance [T, m].
struct EnsembleForecast {
  double xi = 0.0;
  Tensor samples;
  Tensor mean;
  Tensor variance;

  std::size_t steps() const { return samples.dims().at(0); }
  std::size_t members() const { return samples.dims().at(1); }
  std::size_t dim() const { return samples.dims().at(2); }
};

/// Mean and unbiased (N - 1) variance of a [T, N, m] sample tensor.
EnsembleForecast ensemble_from_samples(double xi, Tensor samples);

/// Member i encodes the [lookback, m] initial window, perturbs it with
/// noise[i] (a [lookback * latent] row), rolls out `steps` latents and decodes
/// each one.
EnsembleForecast forecast_from_noise(const RomModel& model, const Tensor& initial, double xi, std::size_t steps,
                                     const Tensor& noise);

/// Draws member i's noise from Rng(seed ^ i), so results do not depend on how
/// members are scheduled.
EnsembleForecast forecast_ensemble(const RomModel& model, const Tensor& initial, double xi, std::size_t steps,
                                   std::size_t members, std::uint64_t seed);

/// Mean of the ensemble variance over all times and components.
double uq_scalar(const EnsembleForecast& forecast);

/// A window is `hyper.window()` consecutive rows of one series.
struct WindowRef {
  std::size_t series = 0;
  std::size_t start = 0;
};

/// Inputs of one loss evaluation: normalized window states stacked window by
/// window, the normalized parameter per window and reparameterization noise.
struct LossBatch {
  Tensor states;                 ///< [B * window, m], normalized
  std::vector<double> xi_norm;   ///< B entries
  Tensor noise;                  ///< [B * window, latent]
  std::size_t windows = 0;
};

LossBatch make_batch(const RomModel& model, std::span<const TrainingSeries> data, std::span<const WindowRef> refs,
                     Rng* noise_rng);

struct LossTerms {
  ad::Var total;
  ad::Var reconstruction;
  ad::Var kl;
  ad::Var rollout;
};

/// Training objective on a graph:
///   reconstruction MSE of decode(z) + beta_kl * KL(q || N(0, I))
///   + gamma_roll * MSE between free-rollout predictions over the horizon and
///     the encoded means of the true states.
/// Parameters are read from `params` (merged "enc/", "dec/", "tf/" maps);
/// those whose component is frozen enter as constants.
LossTerms build_loss(ad::Graph& g, const RomModel& model, const ParamMap& params, const LossBatch& batch);

ParamMap all_params(const RomModel& model);

struct TrainSchedule {
  std::size_t epochs = 200;
  double learning_rate = 1e-3;
  /// Cosine decay from learning_rate down to learning_rate * final_lr_fraction
  /// over the epochs; 1 keeps the rate constant.
  double final_lr_fraction = 1.0;
  std::size_t batch = 32;
  /// Share of each batch drawn from the replay set; the rest comes from the
  /// primary data. An epoch visits every primary window once.
  double replay_fraction = 0.0;
  std::size_t monitor_windows = 32;
};

struct TrainReport {
  /// Loss on a fixed monitoring batch (noise-free), before training and after
  /// each epoch.
  std::vector<double> monitor_loss;
  /// Mean optimizer-step loss per epoch.
  std::vector<double> epoch_loss;
  std::size_t steps = 0;
};

using ProgressFn = std::function<void(std::size_t epoch, double loss)>;

/// Adam on the unfrozen components. Throws NumericError naming the epoch and
/// step if the loss stops being finite.
TrainReport train(RomModel& model, std::span<const TrainingSeries> data, std::span<const TrainingSeries> replay,
                  const TrainSchedule& schedule, Rng& rng, const ProgressFn& progress = {});

/// Trains with the schedule stored in the model's hyperparameters.
TrainReport train(RomModel& model, std::span<const TrainingSeries> data, Rng& rng, const ProgressFn& progress = {});

/// Binary checkpoint: "WRCKPT01", u64 header length, JSON header (format
/// version, hyperparameters, freeze flags, name -> offset index), then the
/// concatenated RMX1 blocks of every parameter and the normalization vectors.
void save_checkpoint(const std::filesystem::path& path, const RomModel& model);
RomModel load_checkpoint(const std::filesystem::path& path);

}  // namespace wakerom::rom
