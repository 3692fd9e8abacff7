/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#include "wakerom/rom.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "wakerom/error.hpp"
#include "wakerom/serialize.hpp"

namespace wakerom::rom {

using ad::Graph;
using ad::Var;

namespace {

void require(bool ok, const char* field, const std::string& why) {
  if (!ok) throw ConfigError(std::string("rom.") + field + ": " + why);
}

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

bool is_frozen(const FreezeFlags& f, const std::string& name) {
  if (starts_with(name, "enc/")) return f.encoder;
  if (starts_with(name, "dec/")) return f.decoder;
  if (starts_with(name, "tf/")) return f.transformer;
  throw ContractError("rom: parameter '" + name + "' has no component prefix");
}

// Resolves parameter names to graph leaves, registering each name once.
// Without freeze flags every parameter is a constant.
class Binder {
 public:
  Binder(Graph& g, const ParamMap& params, const FreezeFlags* trainable) : g_(g), params_(params), flags_(trainable) {}

  Var operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    auto p = params_.find(name);
    if (p == params_.end()) throw ContractError("rom: missing parameter '" + name + "'");
    const Var v = (flags_ && !is_frozen(*flags_, name)) ? g_.param(name, p->second) : g_.input(p->second);
    bound_.emplace(name, v);
    return v;
  }

 private:
  Graph& g_;
  const ParamMap& params_;
  const FreezeFlags* flags_;
  std::map<std::string, Var> bound_;
};

Var affine(Graph& g, Binder& P, Var x, const std::string& w, const std::string& b) {
  return g.broadcast_add(g.matmul(x, P(w)), P(b));
}

Var mlp(Graph& g, Binder& P, Var x, const std::string& prefix, std::size_t layers) {
  for (std::size_t i = 0; i < layers; ++i) {
    const auto k = std::to_string(i);
    x = affine(g, P, x, prefix + "w" + k, prefix + "b" + k);
    if (i + 1 < layers) x = g.gelu(x);
  }
  return x;
}

Tensor column(std::size_t n, double value) { return Tensor::filled({n, 1}, value); }

struct Encoded {
  Var mean;
  Var logvar;
};

Encoded encoder(Graph& g, Binder& P, const RomHyper& h, Var x, Var xi_col) {
  Var out = mlp(g, P, g.concat_cols(x, xi_col), "enc/", h.encoder_hidden.size() + 1);
  return {g.slice_cols(out, 0, h.latent), g.slice_cols(out, h.latent, 2 * h.latent)};
}

Var decoder(Graph& g, Binder& P, const RomHyper& h, Var z, Var xi_col) {
  return mlp(g, P, g.concat_cols(z, xi_col), "dec/", h.decoder_hidden.size() + 1);
}

// Parameter context: one [B, 1] column of normalized parameters becomes
// xi_tokens key/value tokens per window.
Var context(Graph& g, Binder& P, const RomHyper& h, Var xi_b, std::size_t batch) {
  Var c = g.tanh(affine(g, P, xi_b, "tf/xi_w", "tf/xi_b"));
  return g.reshape(c, {batch * h.xi_tokens, h.d_model});
}

std::vector<std::size_t> last_rows(std::size_t batch, std::size_t len) {
  std::vector<std::size_t> idx(batch);
  for (std::size_t b = 0; b < batch; ++b) idx[b] = b * len + len - 1;
  return idx;
}

// Next latent for each of the B windows in `window` ([B * lookback, latent]).
Var propagate(Graph& g, Binder& P, const RomHyper& h, Var window, Var ctx, std::size_t batch) {
  const std::size_t d = h.d_model;
  const std::size_t L = h.lookback;
  Var x = g.broadcast_add(affine(g, P, window, "tf/in_w", "tf/in_b"), P("tf/pos"));
  const auto last = last_rows(batch, L);
  for (std::size_t k = 0; k < h.blocks; ++k) {
    const std::string b = "tf/b" + std::to_string(k) + "/";
    // Only the newest position feeds the prediction, so the final block runs
    // its query side for that row alone. The newest row attends to the whole
    // window under the causal mask, so nothing changes numerically.
    const bool final_block = k + 1 == h.blocks;
    const std::size_t q_len = final_block ? 1 : L;
    const ad::AttentionShape self{batch, q_len, L, h.heads, !final_block};
    const ad::AttentionShape cross{batch, q_len, h.xi_tokens, h.heads, false};
    Var a = g.layer_norm(x, P(b + "ln1_g"), P(b + "ln1_b"));
    Var qkv = g.matmul(a, P(b + "qkv_w"));
    Var q_self = g.slice_cols(qkv, 0, d);
    if (final_block) {
      q_self = g.gather_rows(q_self, last);
      x = g.gather_rows(x, last);
    }
    Var att = g.attention(q_self, g.slice_cols(qkv, d, 2 * d), g.slice_cols(qkv, 2 * d, 3 * d), self);
    x = g.add(x, affine(g, P, att, b + "o_w", b + "o_b"));

    Var c = g.layer_norm(x, P(b + "ln2_g"), P(b + "ln2_b"));
    Var q = g.matmul(c, P(b + "cq_w"));
    Var kv = g.matmul(ctx, P(b + "ckv_w"));
    Var catt = g.attention(q, g.slice_cols(kv, 0, d), g.slice_cols(kv, d, 2 * d), cross);
    x = g.add(x, affine(g, P, catt, b + "co_w", b + "co_b"));

    Var f = g.layer_norm(x, P(b + "ln3_g"), P(b + "ln3_b"));
    Var ff = affine(g, P, g.gelu(affine(g, P, f, b + "ff1_w", b + "ff1_b")), b + "ff2_w", b + "ff2_b");
    x = g.add(x, ff);
  }
  Var hl = g.layer_norm(x, P("tf/lnf_g"), P("tf/lnf_b"));
  Var delta = affine(g, P, hl, "tf/out_w", "tf/out_b");
  return g.add(g.gather_rows(window, last), delta);
}

// Drops each window's oldest latent and appends its prediction.
Var shift(Graph& g, Var window, Var pred, std::size_t batch, std::size_t len) {
  Var both = g.concat_rows(window, pred);
  std::vector<std::size_t> idx;
  idx.reserve(batch * len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 1; j < len; ++j) idx.push_back(b * len + j);
    idx.push_back(batch * len + b);
  }
  return g.gather_rows(both, std::move(idx));
}

void check_states(const RomModel& model, const Tensor& states, const char* what) {
  if (states.rank() != 2 || states.cols() != model.hyper.state_dim) {
    throw ShapeError(std::string(what) + ": expected [n, " + std::to_string(model.hyper.state_dim) + "], got " +
                     dims_to_string(states.dims()));
  }
}

Tensor randn(Dims dims, double sd, Rng& rng) {
  Tensor t(std::move(dims));
  for (auto& v : t.data()) v = sd * rng.normal();
  return t;
}

}  // namespace

void RomHyper::validate() const {
  require(state_dim >= 1, "state_dim", "must be positive");
  require(latent >= 1, "latent", "must be positive");
  for (auto w : encoder_hidden) require(w >= 1, "encoder_hidden", "layer widths must be positive");
  for (auto w : decoder_hidden) require(w >= 1, "decoder_hidden", "layer widths must be positive");
  require(blocks >= 1, "blocks", "must be positive");
  require(heads >= 1, "heads", "must be positive");
  require(d_model >= 1 && d_model % heads == 0, "d_model", "must be a positive multiple of heads");
  require(ff_hidden >= 1, "ff_hidden", "must be positive");
  require(xi_tokens >= 1, "xi_tokens", "must be positive");
  require(lookback >= 1, "lookback", "must be positive");
  require(horizon >= 1, "horizon", "must be positive");
  require(std::isfinite(beta_kl) && beta_kl >= 0.0, "beta_kl", "must be non-negative");
  require(std::isfinite(gamma_roll) && gamma_roll >= 0.0, "gamma_roll", "must be non-negative");
  require(std::isfinite(learning_rate) && learning_rate > 0.0, "learning_rate", "must be positive");
  require(final_lr_fraction > 0.0 && final_lr_fraction <= 1.0, "final_lr_fraction", "must lie in (0, 1]");
  require(batch >= 1, "batch", "must be positive");
  require(std::isfinite(xi_center), "xi_center", "must be finite");
  require(std::isfinite(xi_scale) && xi_scale > 0.0, "xi_scale", "must be positive");
}

Tensor Normalization::normalize(const Tensor& states) const {
  if (states.cols() != mean.size() || scale.size() != mean.size()) {
    throw ShapeError("normalize: state width " + std::to_string(states.cols()) + " vs " + std::to_string(mean.size()));
  }
  Tensor out(states.dims());
  const std::size_t m = mean.size();
  for (std::size_t r = 0; r < states.rows(); ++r) {
    auto src = states.row(r);
    auto dst = out.row(r);
    for (std::size_t j = 0; j < m; ++j) dst[j] = (src[j] - mean[j]) / scale[j];
  }
  return out;
}

Tensor Normalization::denormalize(const Tensor& normalized) const {
  if (normalized.cols() != mean.size() || scale.size() != mean.size()) {
    throw ShapeError("denormalize: state width " + std::to_string(normalized.cols()) + " vs " +
                     std::to_string(mean.size()));
  }
  Tensor out(normalized.dims());
  const std::size_t m = mean.size();
  for (std::size_t r = 0; r < normalized.rows(); ++r) {
    auto src = normalized.row(r);
    auto dst = out.row(r);
    for (std::size_t j = 0; j < m; ++j) dst[j] = src[j] * scale[j] + mean[j];
  }
  return out;
}

Normalization fit_normalization(std::span<const TrainingSeries> data) {
  if (data.empty()) throw ContractError("fit_normalization: no training data");
  const std::size_t m = data.front().states.cols();
  Normalization n;
  n.mean.assign(m, 0.0);
  std::size_t count = 0;
  for (const auto& s : data) {
    if (s.states.rank() != 2 || s.states.cols() != m) throw ShapeError("fit_normalization: inconsistent state widths");
    for (std::size_t r = 0; r < s.states.rows(); ++r) {
      auto row = s.states.row(r);
      for (std::size_t j = 0; j < m; ++j) n.mean[j] += row[j];
    }
    count += s.states.rows();
  }
  if (count == 0) throw ContractError("fit_normalization: no snapshots");
  for (auto& v : n.mean) v /= static_cast<double>(count);
  double ss = 0.0;
  for (const auto& s : data) {
    for (std::size_t r = 0; r < s.states.rows(); ++r) {
      auto row = s.states.row(r);
      for (std::size_t j = 0; j < m; ++j) ss += (row[j] - n.mean[j]) * (row[j] - n.mean[j]);
    }
  }
  double sd = std::sqrt(ss / static_cast<double>(count * m));
  if (!(sd > 1e-12)) sd = 1.0;
  n.scale.assign(m, sd);
  return n;
}

RomModel init_model(const RomHyper& h, Normalization norm, Rng& rng) {
  h.validate();
  if (norm.mean.empty()) {
    norm.mean.assign(h.state_dim, 0.0);
    norm.scale.assign(h.state_dim, 1.0);
  }
  if (norm.mean.size() != h.state_dim || norm.scale.size() != h.state_dim) {
    throw ShapeError("init_model: normalization width does not match state_dim");
  }
  RomModel model;
  model.hyper = h;
  model.norm = std::move(norm);

  auto dense_stack = [&](ParamMap& out, const std::string& prefix, std::size_t in,
                         const std::vector<std::size_t>& hidden, std::size_t outdim) {
    std::vector<std::size_t> widths{in};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(outdim);
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      const auto k = std::to_string(i);
      out[prefix + "w" + k] = randn({widths[i], widths[i + 1]}, 1.0 / std::sqrt(double(widths[i])), rng);
      out[prefix + "b" + k] = Tensor({1, widths[i + 1]});
    }
  };
  dense_stack(model.encoder, "enc/", h.state_dim + 1, h.encoder_hidden, 2 * h.latent);
  dense_stack(model.decoder, "dec/", h.latent + 1, h.decoder_hidden, h.state_dim);

  const std::size_t d = h.d_model;
  auto& t = model.transformer;
  auto w = [&](std::size_t in, std::size_t out) { return randn({in, out}, 1.0 / std::sqrt(double(in)), rng); };
  t["tf/in_w"] = w(h.latent, d);
  t["tf/in_b"] = Tensor({1, d});
  t["tf/pos"] = randn({h.lookback, d}, 0.1, rng);
  t["tf/xi_w"] = w(1, h.xi_tokens * d);
  t["tf/xi_b"] = randn({1, h.xi_tokens * d}, 0.5, rng);
  for (std::size_t k = 0; k < h.blocks; ++k) {
    const std::string b = "tf/b" + std::to_string(k) + "/";
    for (const char* ln : {"ln1", "ln2", "ln3"}) {
      t[b + ln + "_g"] = Tensor::filled({1, d}, 1.0);
      t[b + ln + "_b"] = Tensor({1, d});
    }
    t[b + "qkv_w"] = w(d, 3 * d);
    t[b + "o_w"] = w(d, d);
    t[b + "o_b"] = Tensor({1, d});
    t[b + "cq_w"] = w(d, d);
    t[b + "ckv_w"] = w(d, 2 * d);
    t[b + "co_w"] = w(d, d);
    t[b + "co_b"] = Tensor({1, d});
    t[b + "ff1_w"] = w(d, h.ff_hidden);
    t[b + "ff1_b"] = Tensor({1, h.ff_hidden});
    t[b + "ff2_w"] = w(h.ff_hidden, d);
    t[b + "ff2_b"] = Tensor({1, d});
  }
  t["tf/lnf_g"] = Tensor::filled({1, d}, 1.0);
  t["tf/lnf_b"] = Tensor({1, d});
  // Small output layer: the untrained propagator starts close to persistence.
  t["tf/out_w"] = randn({d, h.latent}, 0.01 / std::sqrt(double(d)), rng);
  t["tf/out_b"] = Tensor({1, h.latent});
  return model;
}

ParamMap all_params(const RomModel& model) {
  ParamMap all = model.encoder;
  all.insert(model.decoder.begin(), model.decoder.end());
  all.insert(model.transformer.begin(), model.transformer.end());
  return all;
}

LatentBatch encode_batch(const RomModel& model, const Tensor& states, double xi) {
  check_states(model, states, "encode");
  Graph g;
  Binder P(g, model.encoder, nullptr);
  const std::size_t n = states.rows();
  auto e = encoder(g, P, model.hyper, g.input(model.norm.normalize(states)), g.input(column(n, model.normalize_xi(xi))));
  return {g.value(e.mean), g.value(e.logvar)};
}

LatentGaussian encode(const RomModel& model, std::span<const double> state, double xi) {
  Tensor s({1, state.size()}, std::vector<double>(state.begin(), state.end()));
  auto b = encode_batch(model, s, xi);
  return {b.mean.vector(), b.logvar.vector()};
}

std::vector<double> reparameterize(const LatentGaussian& g, Rng& rng) {
  if (g.mean.size() != g.logvar.size()) throw ShapeError("reparameterize: mean and logvar sizes differ");
  std::vector<double> z(g.mean.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double n = rng.normal();
    z[i] = g.logvar[i] < -100.0 ? g.mean[i] : g.mean[i] + std::exp(0.5 * g.logvar[i]) * n;
  }
  return z;
}

Tensor decode_batch(const RomModel& model, const Tensor& z, double xi) {
  if (z.rank() != 2 || z.cols() != model.hyper.latent) {
    throw ShapeError("decode: expected [n, " + std::to_string(model.hyper.latent) + "], got " +
                     dims_to_string(z.dims()));
  }
  constexpr std::size_t chunk = 2048;
  Tensor out({z.rows(), model.hyper.state_dim});
  for (std::size_t begin = 0; begin < z.rows(); begin += chunk) {
    const std::size_t end = std::min(z.rows(), begin + chunk);
    Graph g;
    Binder P(g, model.decoder, nullptr);
    Var x = decoder(g, P, model.hyper, g.input(slice_rows(z, begin, end)),
                    g.input(column(end - begin, model.normalize_xi(xi))));
    Tensor phys = model.norm.denormalize(g.value(x));
    std::copy(phys.data().begin(), phys.data().end(), out.row(begin).begin());
  }
  return out;
}

std::vector<double> decode(const RomModel& model, std::span<const double> z, double xi) {
  return decode_batch(model, Tensor({1, z.size()}, std::vector<double>(z.begin(), z.end())), xi).vector();
}

Tensor rollout_batch(const RomModel& model, const Tensor& windows, double xi, std::size_t steps) {
  const auto& h = model.hyper;
  if (windows.rank() != 2 || windows.cols() != h.latent || windows.rows() % h.lookback != 0 || windows.rows() == 0) {
    throw ShapeError("rollout: expected [B * " + std::to_string(h.lookback) + ", " + std::to_string(h.latent) +
                     "], got " + dims_to_string(windows.dims()));
  }
  const std::size_t batch = windows.rows() / h.lookback;
  Tensor out({steps, batch, h.latent});
  Tensor current = windows;
  const Tensor xi_b = column(batch, model.normalize_xi(xi));
  for (std::size_t s = 0; s < steps; ++s) {
    Graph g;
    Binder P(g, model.transformer, nullptr);
    Var ctx = context(g, P, h, g.input(xi_b), batch);
    Var w = g.input(current);
    Var pred = propagate(g, P, h, w, ctx, batch);
    const auto& pv = g.value(pred);
    std::copy(pv.data().begin(), pv.data().end(), out.data().begin() + s * batch * h.latent);
    current = g.value(shift(g, w, pred, batch, h.lookback));
  }
  return out;
}

Tensor rollout(const RomModel& model, const Tensor& window, double xi, std::size_t steps) {
  if (window.rank() != 2 || window.rows() != model.hyper.lookback) {
    throw ShapeError("rollout: expected [" + std::to_string(model.hyper.lookback) + ", latent] window, got " +
                     dims_to_string(window.dims()));
  }
  return rollout_batch(model, window, xi, steps).reshaped({steps, model.hyper.latent});
}

EnsembleForecast ensemble_from_samples(double xi, Tensor samples) {
  if (samples.rank() != 3) throw ShapeError("ensemble: expected [T, N, m], got " + dims_to_string(samples.dims()));
  const std::size_t T = samples.dims()[0], N = samples.dims()[1], m = samples.dims()[2];
  if (N < 2) throw ContractError("ensemble: need at least two members for a variance");
  EnsembleForecast f;
  f.xi = xi;
  f.mean = Tensor({T, m});
  f.variance = Tensor({T, m});
  const auto data = samples.data();
  for (std::size_t t = 0; t < T; ++t) {
    auto mu = f.mean.row(t);
    auto var = f.variance.row(t);
    for (std::size_t i = 0; i < N; ++i) {
      const double* x = &data[(t * N + i) * m];
      for (std::size_t j = 0; j < m; ++j) mu[j] += x[j];
    }
    for (auto& v : mu) v /= static_cast<double>(N);
    for (std::size_t i = 0; i < N; ++i) {
      const double* x = &data[(t * N + i) * m];
      for (std::size_t j = 0; j < m; ++j) var[j] += (x[j] - mu[j]) * (x[j] - mu[j]);
    }
    for (auto& v : var) v /= static_cast<double>(N - 1);
  }
  f.samples = std::move(samples);
  return f;
}

EnsembleForecast forecast_from_noise(const RomModel& model, const Tensor& initial, double xi, std::size_t steps,
                                     const Tensor& noise) {
  const auto& h = model.hyper;
  check_states(model, initial, "forecast");
  if (initial.rows() != h.lookback) {
    throw ShapeError("forecast: initial window needs " + std::to_string(h.lookback) + " snapshots, got " +
                     std::to_string(initial.rows()));
  }
  if (noise.rank() != 2 || noise.cols() != h.lookback * h.latent || noise.rows() == 0) {
    throw ShapeError("forecast: noise must be [N, lookback * latent], got " + dims_to_string(noise.dims()));
  }
  if (steps == 0) throw ContractError("forecast: zero steps");
  const std::size_t N = noise.rows();
  const auto enc = encode_batch(model, initial, xi);
  Tensor windows({N * h.lookback, h.latent});
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t k = 0; k < h.lookback * h.latent; ++k) {
      const double lv = enc.logvar[k];
      const double sd = lv < -100.0 ? 0.0 : std::exp(0.5 * lv);
      windows[i * h.lookback * h.latent + k] = enc.mean[k] + sd * noise(i, k);
    }
  }
  Tensor z = rollout_batch(model, windows, xi, steps);
  Tensor states = decode_batch(model, z.reshaped({steps * N, h.latent}), xi);
  return ensemble_from_samples(xi, states.reshaped({steps, N, h.state_dim}));
}

EnsembleForecast forecast_ensemble(const RomModel& model, const Tensor& initial, double xi, std::size_t steps,
                                   std::size_t members, std::uint64_t seed) {
  if (members < 2) throw ContractError("forecast: need at least two members");
  const std::size_t w = model.hyper.lookback * model.hyper.latent;
  Tensor noise({members, w});
  const Rng base(seed);
  for (std::size_t i = 0; i < members; ++i) {
    Rng r = base.split(i);
    for (auto& v : noise.row(i)) v = r.normal();
  }
  return forecast_from_noise(model, initial, xi, steps, noise);
}

double uq_scalar(const EnsembleForecast& f) {
  if (f.variance.empty()) throw ContractError("uq_scalar: empty forecast");
  double s = 0.0;
  for (double v : f.variance.data()) s += v;
  return s / static_cast<double>(f.variance.size());
}

LossBatch make_batch(const RomModel& model, std::span<const TrainingSeries> data, std::span<const WindowRef> refs,
                     Rng* noise_rng) {
  const auto& h = model.hyper;
  const std::size_t W = h.window();
  const std::size_t m = h.state_dim;
  LossBatch b;
  b.windows = refs.size();
  b.states = Tensor({refs.size() * W, m});
  b.noise = Tensor({refs.size() * W, h.latent});
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& r = refs[i];
    if (r.series >= data.size()) throw ContractError("make_batch: series index out of range");
    const auto& s = data[r.series];
    check_states(model, s.states, "make_batch");
    if (r.start + W > s.states.rows()) throw ContractError("make_batch: window runs past the end of the series");
    b.xi_norm.push_back(model.normalize_xi(s.xi));
    for (std::size_t k = 0; k < W; ++k) {
      auto src = s.states.row(r.start + k);
      auto dst = b.states.row(i * W + k);
      for (std::size_t j = 0; j < m; ++j) dst[j] = (src[j] - model.norm.mean[j]) / model.norm.scale[j];
    }
  }
  if (noise_rng) noise_rng->fill_normal(b.noise.data());
  return b;
}

LossTerms build_loss(Graph& g, const RomModel& model, const ParamMap& params, const LossBatch& batch) {
  const auto& h = model.hyper;
  const std::size_t B = batch.windows;
  const std::size_t W = h.window();
  const std::size_t L = h.lookback;
  const std::size_t n = B * W;
  if (B == 0 || batch.states.rows() != n || batch.noise.rows() != n || batch.xi_norm.size() != B) {
    throw ShapeError("build_loss: inconsistent batch");
  }
  Binder P(g, params, &model.frozen);

  Tensor xi_rows({n, 1});
  Tensor xi_b({B, 1});
  for (std::size_t b = 0; b < B; ++b) {
    xi_b[b] = batch.xi_norm[b];
    for (std::size_t k = 0; k < W; ++k) xi_rows[b * W + k] = batch.xi_norm[b];
  }
  Var x = g.input(batch.states);
  Var xr = g.input(xi_rows);
  auto e = encoder(g, P, h, x, xr);
  Var sd = g.exp(g.scale(e.logvar, 0.5));
  Var z = g.add(e.mean, g.mul(sd, g.input(batch.noise)));
  Var recon = g.mse(decoder(g, P, h, z, xr), x);

  Var kl_sum = g.sub(g.add(g.sum(g.exp(e.logvar)), g.sum(g.mul(e.mean, e.mean))), g.sum(e.logvar));
  Var kl = g.scale(g.add_scalar(kl_sum, -double(n * h.latent)), 0.5 / double(n));

  std::vector<std::size_t> idx;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < L; ++j) idx.push_back(b * W + j);
  Var window = g.gather_rows(e.mean, idx);
  Var ctx = context(g, P, h, g.input(xi_b), B);
  Var roll;
  for (std::size_t s = 0; s < h.horizon; ++s) {
    Var pred = propagate(g, P, h, window, ctx, B);
    std::vector<std::size_t> tgt(B);
    for (std::size_t b = 0; b < B; ++b) tgt[b] = b * W + L + s;
    Var err = g.mse(pred, g.gather_rows(e.mean, tgt));
    roll = roll.valid() ? g.add(roll, err) : err;
    if (s + 1 < h.horizon) window = shift(g, window, pred, B, L);
  }
  roll = g.scale(roll, 1.0 / double(h.horizon));

  Var total = g.add(g.add(recon, g.scale(kl, h.beta_kl)), g.scale(roll, h.gamma_roll));
  return {total, recon, kl, roll};
}

namespace {

struct Adam {
  explicit Adam(double rate) : lr(rate) {}

  double lr;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t t = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments;

  void step(RomModel& model, const ParamMap& grads) {
    ++t;
    const double c1 = 1.0 - std::pow(beta1, double(t));
    const double c2 = 1.0 - std::pow(beta2, double(t));
    for (auto* comp : {&model.encoder, &model.decoder, &model.transformer}) {
      for (auto& [name, value] : *comp) {
        if (is_frozen(model.frozen, name)) continue;
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        auto& [mt, vt] = moments.try_emplace(name, Tensor(value.dims()), Tensor(value.dims())).first->second;
        auto g = git->second.data();
        auto p = value.data();
        auto m = mt.data();
        auto v = vt.data();
        for (std::size_t i = 0; i < p.size(); ++i) {
          m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
          v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
          p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
      }
    }
  }
};

std::vector<WindowRef> all_windows(std::span<const TrainingSeries> data, std::size_t W) {
  std::vector<WindowRef> out;
  for (std::size_t s = 0; s < data.size(); ++s) {
    for (std::size_t k = 0; k + W <= data[s].states.rows(); ++k) out.push_back({s, k});
  }
  return out;
}

}  // namespace

TrainReport train(RomModel& model, std::span<const TrainingSeries> data, std::span<const TrainingSeries> replay,
                  const TrainSchedule& sch, Rng& rng, const ProgressFn& progress) {
  const auto& h = model.hyper;
  h.validate();
  if (!(sch.learning_rate > 0.0)) throw ConfigError("train.learning_rate: must be positive");
  if (!(sch.final_lr_fraction > 0.0 && sch.final_lr_fraction <= 1.0)) {
    throw ConfigError("train.final_lr_fraction: must lie in (0, 1]");
  }
  if (sch.batch == 0) throw ConfigError("train.batch: must be positive");
  if (!(sch.replay_fraction >= 0.0 && sch.replay_fraction < 1.0)) {
    throw ConfigError("train.replay_fraction: must lie in [0, 1)");
  }
  const std::size_t W = h.window();
  const auto primary = all_windows(data, W);
  if (primary.empty()) throw ContractError("train: no series holds a full window of " + std::to_string(W));
  const auto replay_refs = all_windows(replay, W);

  // Replay windows index past the primary series in a combined list.
  std::vector<TrainingSeries> combined(data.begin(), data.end());
  combined.insert(combined.end(), replay.begin(), replay.end());
  std::size_t n_replay = replay_refs.empty() ? 0 : std::size_t(std::lround(sch.replay_fraction * double(sch.batch)));
  n_replay = std::min(n_replay, sch.batch - 1);
  const std::size_t n_primary = sch.batch - n_replay;

  std::vector<WindowRef> monitor;
  const std::size_t nm = std::min(sch.monitor_windows, primary.size());
  for (std::size_t i = 0; i < nm; ++i) monitor.push_back(primary[i * primary.size() / std::max<std::size_t>(nm, 1)]);
  const LossBatch monitor_batch = make_batch(model, combined, monitor, nullptr);
  auto monitor_loss = [&]() {
    // Everything enters as a constant; no gradients are needed here.
    Graph g;
    RomModel probe;
    probe.hyper = model.hyper;
    probe.frozen = {true, true, true};
    auto terms = build_loss(g, probe, all_params(model), monitor_batch);
    return g.value(terms.total)[0];
  };

  const bool any_trainable = !(model.frozen.encoder && model.frozen.decoder && model.frozen.transformer);
  TrainReport report;
  report.monitor_loss.push_back(monitor_loss());
  Adam adam(sch.learning_rate);
  std::vector<WindowRef> order = primary;
  for (std::size_t epoch = 0; epoch < sch.epochs; ++epoch) {
    double sum = 0.0;
    std::size_t steps = 0;
    const double phase = sch.epochs > 1 ? double(epoch) / double(sch.epochs - 1) : 0.0;
    adam.lr = sch.learning_rate * (sch.final_lr_fraction +
                                   (1.0 - sch.final_lr_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * phase)));
    if (any_trainable) {
      rng.shuffle(order);
      for (std::size_t begin = 0; begin < order.size(); begin += n_primary) {
        std::vector<WindowRef> refs(order.begin() + begin, order.begin() + std::min(order.size(), begin + n_primary));
        for (std::size_t r = 0; r < n_replay; ++r) {
          WindowRef w = replay_refs[rng.below(replay_refs.size())];
          w.series += data.size();
          refs.push_back(w);
        }
        const LossBatch batch = make_batch(model, combined, refs, &rng);
        double loss = 0.0;
        ParamMap grads;
        try {
          Graph g;
          const auto params = all_params(model);
          auto terms = build_loss(g, model, params, batch);
          loss = g.value(terms.total)[0];
          grads = g.backward(terms.total);
        } catch (const NumericError& e) {
          throw NumericError("train: epoch " + std::to_string(epoch) + " step " + std::to_string(steps) + ": " +
                             e.what());
        }
        if (!std::isfinite(loss)) {
          throw NumericError("train: loss is not finite at epoch " + std::to_string(epoch) + " step " +
                             std::to_string(steps));
        }
        adam.step(model, grads);
        sum += loss;
        ++steps;
      }
    }
    report.steps += steps;
    report.epoch_loss.push_back(steps ? sum / double(steps) : report.monitor_loss.back());
    report.monitor_loss.push_back(any_trainable ? monitor_loss() : report.monitor_loss.back());
    if (progress) progress(epoch, report.monitor_loss.back());
  }
  return report;
}

TrainReport train(RomModel& model, std::span<const TrainingSeries> data, Rng& rng, const ProgressFn& progress) {
  TrainSchedule s;
  s.epochs = model.hyper.epochs;
  s.learning_rate = model.hyper.learning_rate;
  s.final_lr_fraction = model.hyper.final_lr_fraction;
  s.batch = model.hyper.batch;
  return train(model, data, {}, s, rng, progress);
}

namespace {
constexpr char kMagic[8] = {'W', 'R', 'C', 'K', 'P', 'T', '0', '1'};
constexpr int kFormatVersion = 1;

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw IoError("truncated checkpoint header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const RomModel& model) {
  std::ostringstream blob;
  nlohmann::json index = nlohmann::json::array();
  auto add = [&](const std::string& name, const Tensor& t) {
    const auto offset = static_cast<std::uint64_t>(blob.tellp());
    write_rmx(blob, t);
    index.push_back({{"name", name}, {"offset", offset}, {"bytes", std::uint64_t(blob.tellp()) - offset}});
  };
  for (const auto& [name, t] : all_params(model)) add(name, t);
  add("norm/mean", Tensor({model.norm.mean.size()}, model.norm.mean));
  add("norm/scale", Tensor({model.norm.scale.size()}, model.norm.scale));

  nlohmann::json header;
  header["format_version"] = kFormatVersion;
  header["hyper"] = model.hyper;
  header["frozen"] = {{"encoder", model.frozen.encoder},
                      {"decoder", model.frozen.decoder},
                      {"transformer", model.frozen.transformer}};
  header["index"] = index;
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof kMagic);
  put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  const std::string payload = blob.str();
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

RomModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  try {
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw IoError("not a wakerom checkpoint");
    const auto len = get_u64(is);
    if (len > (1u << 30)) throw IoError("implausible header length");
    std::string text(len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw IoError("truncated header");
    const std::string payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

    nlohmann::json header = nlohmann::json::parse(text);
    if (header.at("format_version").get<int>() != kFormatVersion) throw IoError("unsupported format version");
    const RomHyper hyper = header.at("hyper").get<RomHyper>();
    Rng dummy(0);
    RomModel model = init_model(hyper, {}, dummy);
    const auto& fz = header.at("frozen");
    model.frozen = {fz.at("encoder").get<bool>(), fz.at("decoder").get<bool>(), fz.at("transformer").get<bool>()};

    std::map<std::string, Tensor> blocks;
    for (const auto& e : header.at("index")) {
      const auto off = e.at("offset").get<std::uint64_t>();
      const auto bytes = e.at("bytes").get<std::uint64_t>();
      if (off + bytes > payload.size()) throw IoError("block '" + e.at("name").get<std::string>() + "' out of range");
      std::istringstream block(payload.substr(off, bytes));
      blocks[e.at("name").get<std::string>()] = read_rmx(block);
    }
    auto take = [&](const std::string& name, const Dims& dims) {
      auto it = blocks.find(name);
      if (it == blocks.end()) throw IoError("missing block '" + name + "'");
      if (it->second.dims() != dims) {
        throw IoError("block '" + name + "' has dims " + dims_to_string(it->second.dims()) + ", expected " +
                      dims_to_string(dims));
      }
      return it->second;
    };
    for (auto* comp : {&model.encoder, &model.decoder, &model.transformer}) {
      for (auto& [name, t] : *comp) t = take(name, t.dims());
    }
    model.norm.mean = take("norm/mean", {hyper.state_dim}).vector();
    model.norm.scale = take("norm/scale", {hyper.state_dim}).vector();
    return model;
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": bad header: " + e.what());
  } catch (const ConfigError& e) {
    throw IoError(path.string() + ": bad hyperparameters: " + e.what());
  }
}

}  // namespace wakerom::rom
