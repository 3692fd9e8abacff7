/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#include <cmath>
#include <fstream>

#include "doctest.h"
#include "rom_fixtures.hpp"
#include "test_util.hpp"
#include "wakerom/error.hpp"
#include "wakerom/rom.hpp"

using namespace wakerom;
using namespace wakerom::rom;
using namespace romfix;

namespace {

// Gaussian elimination with partial pivoting on a dense system.
std::vector<double> solve_dense(std::vector<std::vector<double>> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t p = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[p][c])) p = r;
    std::swap(a[c], a[p]);
    std::swap(b[c], b[p]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k < n; ++k) a[r][k] -= f * a[c][k];
      b[r] -= f * b[c];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a[i][k] * x[k];
    x[i] = s / a[i][i];
  }
  return x;
}

}  // namespace

TEST_CASE("full training loss matches finite differences on a miniature model") {
  std::vector<TrainingSeries> data{toy_series(90, 8, 12), toy_series(120, 8, 12, 0.4)};
  RomModel model = mini_model(11, data);
  Rng rng(5);
  std::vector<WindowRef> refs{{0, 1}, {1, 3}};
  const LossBatch batch = make_batch(model, data, refs, &rng);
  LossBuilder f = [&](ad::Graph& g, const ParamMap& p) { return build_loss(g, model, p, batch).total; };
  const double err = grad_check(f, all_params(model), 1e-5);
  INFO("max relative error " << err);
  CHECK(err < 1e-5);

  SUBCASE("frozen components receive no gradient but pass it through") {
    model.frozen.transformer = true;
    ad::Graph g;
    auto terms = build_loss(g, model, all_params(model), batch);
    auto grads = g.backward(terms.total);
    double tf_norm = 0.0, enc_norm = 0.0;
    for (const auto& [k, v] : grads) {
      for (double x : v.data()) (k.rfind("tf/", 0) == 0 ? tf_norm : enc_norm) += x * x;
    }
    CHECK(tf_norm == 0.0);
    CHECK(enc_norm > 0.0);
  }
}

TEST_CASE("KL term equals the closed form of the encoder outputs") {
  std::vector<TrainingSeries> data{toy_series(100, 6, 12)};
  RomModel model = mini_model(3, data);
  std::vector<WindowRef> refs{{0, 0}};
  const LossBatch batch = make_batch(model, data, refs, nullptr);
  ad::Graph g;
  auto terms = build_loss(g, model, all_params(model), batch);
  auto enc = encode_batch(model, slice_rows(data[0].states, 0, 5), 100.0);
  double kl = 0.0;
  for (std::size_t i = 0; i < enc.mean.size(); ++i) {
    kl += 0.5 * (std::exp(enc.logvar[i]) + enc.mean[i] * enc.mean[i] - 1.0 - enc.logvar[i]);
  }
  kl /= 5.0;
  CHECK(g.value(terms.kl)[0] == doctest::Approx(kl).epsilon(1e-12));
  CHECK(g.value(terms.kl)[0] >= 0.0);
}

TEST_CASE("normalization round trip") {
  std::vector<TrainingSeries> data{toy_series(95, 20, 12), toy_series(130, 15, 12, 1.0)};
  auto n = fit_normalization(data);
  auto back = n.denormalize(n.normalize(data[1].states));
  for (std::size_t i = 0; i < back.size(); ++i) CHECK(std::abs(back[i] - data[1].states[i]) < 1e-12);
  auto z = n.normalize(data[0].states);
  double mean0 = 0.0;
  for (std::size_t t = 0; t < z.rows(); ++t) mean0 += z(t, 0);
  CHECK(std::isfinite(mean0));
  CHECK_THROWS_AS(n.normalize(Tensor({2, 5})), ShapeError);
}

TEST_CASE("reparameterization moments and the deterministic limit") {
  LatentGaussian q{{0.5, -1.0, 2.0}, {0.0, std::log(0.25), -300.0}};
  Rng rng(17);
  const int n = 40000;
  std::vector<double> s1(3, 0.0), s2(3, 0.0);
  for (int i = 0; i < n; ++i) {
    auto z = reparameterize(q, rng);
    CHECK(z[2] == 2.0);
    for (int j = 0; j < 3; ++j) {
      s1[j] += z[j];
      s2[j] += z[j] * z[j];
    }
  }
  for (int j = 0; j < 2; ++j) {
    const double mean = s1[j] / n;
    const double var = s2[j] / n - mean * mean;
    const double want_var = std::exp(q.logvar[j]);
    CHECK(std::abs(mean - q.mean[j]) < 4.0 * std::sqrt(want_var / n));
    CHECK(std::abs(var - want_var) < 0.03 * want_var);
  }
}

TEST_CASE("rollout composes step by step and batches consistently") {
  std::vector<TrainingSeries> data{toy_series(110, 10, 12)};
  RomModel model = mini_model(8, data);
  Rng rng(2);
  Tensor w({3, 2});
  for (auto& v : w.data()) v = rng.normal();
  auto two = rollout(model, w, 110.0, 2);
  auto one = rollout(model, w, 110.0, 1);
  CHECK(two.row(0)[0] == one.row(0)[0]);
  Tensor shifted({3, 2}, {w(1, 0), w(1, 1), w(2, 0), w(2, 1), one(0, 0), one(0, 1)});
  auto next = rollout(model, shifted, 110.0, 1);
  CHECK(next(0, 0) == doctest::Approx(two(1, 0)).epsilon(1e-14));
  CHECK(next(0, 1) == doctest::Approx(two(1, 1)).epsilon(1e-14));

  Tensor w2({3, 2});
  for (auto& v : w2.data()) v = rng.normal();
  Tensor both({6, 2});
  std::copy(w.data().begin(), w.data().end(), both.data().begin());
  std::copy(w2.data().begin(), w2.data().end(), both.data().begin() + 6);
  auto batched = rollout_batch(model, both, 110.0, 4);
  auto solo = rollout(model, w2, 110.0, 4);
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t j = 0; j < 2; ++j) CHECK(batched[(s * 2 + 1) * 2 + j] == doctest::Approx(solo(s, j)).epsilon(1e-13));
  CHECK_THROWS_AS(rollout(model, Tensor({2, 2}), 110.0, 1), ShapeError);
}

// Straightforward propagator: every block processes all window positions and
// the newest position is read off at the end.
Tensor reference_step(const RomModel& m, const Tensor& window, double xi) {
  const auto& h = m.hyper;
  const ParamMap& p = m.transformer;
  ad::Graph g;
  auto in = [&](const std::string& n) { return g.input(p.at(n)); };
  auto lin = [&](ad::Var x, const std::string& w, const std::string& b) {
    return g.broadcast_add(g.matmul(x, in(w)), in(b));
  };
  const std::size_t d = h.d_model, L = h.lookback;
  ad::Var w = g.input(window);
  ad::Var x = g.broadcast_add(lin(w, "tf/in_w", "tf/in_b"), in("tf/pos"));
  ad::Var ctx = g.reshape(g.tanh(lin(g.input(Tensor::filled({1, 1}, m.normalize_xi(xi))), "tf/xi_w", "tf/xi_b")),
                          {h.xi_tokens, d});
  for (std::size_t k = 0; k < h.blocks; ++k) {
    const std::string b = "tf/b" + std::to_string(k) + "/";
    ad::Var a = g.layer_norm(x, in(b + "ln1_g"), in(b + "ln1_b"));
    ad::Var qkv = g.matmul(a, in(b + "qkv_w"));
    ad::Var att = g.attention(g.slice_cols(qkv, 0, d), g.slice_cols(qkv, d, 2 * d), g.slice_cols(qkv, 2 * d, 3 * d),
                              {1, L, L, h.heads, true});
    x = g.add(x, lin(att, b + "o_w", b + "o_b"));
    ad::Var c = g.layer_norm(x, in(b + "ln2_g"), in(b + "ln2_b"));
    ad::Var kv = g.matmul(ctx, in(b + "ckv_w"));
    ad::Var catt = g.attention(g.matmul(c, in(b + "cq_w")), g.slice_cols(kv, 0, d), g.slice_cols(kv, d, 2 * d),
                               {1, L, h.xi_tokens, h.heads, false});
    x = g.add(x, lin(catt, b + "co_w", b + "co_b"));
    ad::Var f = g.layer_norm(x, in(b + "ln3_g"), in(b + "ln3_b"));
    x = g.add(x, lin(g.gelu(lin(f, b + "ff1_w", b + "ff1_b")), b + "ff2_w", b + "ff2_b"));
  }
  ad::Var hl = g.layer_norm(g.gather_rows(x, {L - 1}), in("tf/lnf_g"), in("tf/lnf_b"));
  return g.value(g.add(g.gather_rows(w, {L - 1}), lin(hl, "tf/out_w", "tf/out_b")));
}

TEST_CASE("propagator matches a full-window reference") {
  for (std::size_t blocks : {1, 2, 3}) {
    RomHyper h = mini_hyper();
    h.blocks = blocks;
    h.lookback = 5;
    Rng rng(blocks);
    RomModel m = init_model(h, {}, rng);
    // Larger output weights so the learned update is not negligible.
    for (auto& v : m.transformer.at("tf/out_w").data()) v = rng.normal();
    Tensor w({5, 2});
    for (auto& v : w.data()) v = rng.normal();
    auto got = rollout(m, w, 125.0, 1);
    auto want = reference_step(m, w, 125.0);
    for (std::size_t j = 0; j < 2; ++j) CHECK(got(0, j) == doctest::Approx(want(0, j)).epsilon(1e-12));
  }
}

TEST_CASE("ensemble forecasts: seeding, variance and identical noise") {
  std::vector<TrainingSeries> data{toy_series(110, 12, 12)};
  RomModel model = mini_model(21, data);
  Tensor init = slice_rows(data[0].states, 0, 3);
  auto a = forecast_ensemble(model, init, 110.0, 5, 6, 99);
  auto b = forecast_ensemble(model, init, 110.0, 5, 6, 99);
  CHECK(a.samples == b.samples);
  CHECK(a.samples.dims() == Dims{5, 6, 12});
  auto c = forecast_ensemble(model, init, 110.0, 5, 3, 99);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 12; ++j) CHECK(c.samples[(t * 3 + i) * 12 + j] == a.samples[(t * 6 + i) * 12 + j]);

  // Variance oracle with the N - 1 normalization.
  for (std::size_t t = 0; t < 5; ++t) {
    for (std::size_t j = 0; j < 12; j += 5) {
      double m = 0.0, v = 0.0;
      for (std::size_t i = 0; i < 6; ++i) m += a.samples[(t * 6 + i) * 12 + j];
      m /= 6.0;
      for (std::size_t i = 0; i < 6; ++i) v += std::pow(a.samples[(t * 6 + i) * 12 + j] - m, 2);
      CHECK(a.variance(t, j) == doctest::Approx(v / 5.0).epsilon(1e-12));
    }
  }
  CHECK(uq_scalar(a) > 0.0);

  Tensor noise({4, 6});
  Rng rng(1);
  for (std::size_t k = 0; k < 6; ++k) {
    const double n = rng.normal();
    for (std::size_t i = 0; i < 4; ++i) noise(i, k) = n;
  }
  auto same = forecast_from_noise(model, init, 110.0, 5, noise);
  for (double v : same.variance.data()) CHECK(v == 0.0);
  CHECK(uq_scalar(same) == 0.0);
  CHECK_THROWS_AS(forecast_ensemble(model, init, 110.0, 5, 1, 0), ContractError);
}

TEST_CASE("training lowers the loss and honours freeze flags") {
  std::vector<TrainingSeries> data{toy_series(90, 30, 12), toy_series(130, 30, 12, 0.7)};
  const RomModel start = mini_model(4, data);

  RomModel m = start;
  Rng rng(10);
  auto report = train(m, data, rng);
  CHECK(report.monitor_loss.size() == 4);
  CHECK(report.monitor_loss.back() < report.monitor_loss.front());
  CHECK(report.steps == 3 * ((2 * (30 - 5 + 1) + 3) / 4));

  RomModel enc_frozen = start;
  enc_frozen.frozen.encoder = true;
  Rng r2(10);
  train(enc_frozen, data, r2);
  CHECK(same_params(enc_frozen.encoder, start.encoder));
  CHECK(!same_params(enc_frozen.decoder, start.decoder));
  CHECK(!same_params(enc_frozen.transformer, start.transformer));

  RomModel all_frozen = start;
  all_frozen.frozen = {true, true, true};
  Rng r3(10);
  auto flat = train(all_frozen, data, r3);
  CHECK(same_params(all_params(all_frozen), all_params(start)));
  for (double l : flat.monitor_loss) CHECK(l == flat.monitor_loss.front());

  Rng r4(10), r5(10);
  RomModel x = start, y = start;
  train(x, data, r4);
  train(y, data, r5);
  CHECK(same_params(all_params(x), all_params(y)));
}

TEST_CASE("replay windows enter finetuning batches") {
  std::vector<TrainingSeries> primary{toy_series(140, 12, 12)};
  std::vector<TrainingSeries> replay{toy_series(90, 12, 12)};
  RomModel m = mini_model(6, primary);
  TrainSchedule s;
  s.epochs = 2;
  s.batch = 4;
  s.learning_rate = 1e-3;
  s.replay_fraction = 0.5;
  Rng rng(3);
  auto r = train(m, primary, replay, s, rng);
  CHECK(r.steps == 2 * 4);  // 8 primary windows, two per step
  s.replay_fraction = 1.0;
  CHECK_THROWS_AS(train(m, primary, replay, s, rng), ConfigError);
}

TEST_CASE("linear decoder converges to the least-squares optimum") {
  // Encoder frozen with vanishing variance, so the decoder sees fixed codes
  // and its best loss is a linear regression onto [z, xi, 1].
  RomHyper h = mini_hyper();
  h.state_dim = 6;
  h.decoder_hidden = {};
  h.beta_kl = 0.0;
  h.gamma_roll = 0.0;
  h.horizon = 1;
  h.lookback = 1;
  h.batch = 64;
  std::vector<TrainingSeries> data{toy_series(100, 40, 6)};
  Rng rng(12);
  RomModel model = init_model(h, fit_normalization(data), rng);
  auto& out_b = model.encoder.at("enc/b2");
  for (std::size_t j = h.latent; j < 2 * h.latent; ++j) out_b[j] = -300.0;
  model.frozen = {true, false, true};

  // Oracle: weighted normal equations over the monitored windows, which
  // count interior snapshots twice. xi is constant, so [z, 1] spans the same
  // space as [z, xi, 1].
  auto enc = encode_batch(model, data[0].states, 100.0);
  auto xn = model.norm.normalize(data[0].states);
  const std::size_t k = h.latent + 1;
  std::vector<std::vector<double>> A(k, std::vector<double>(k, 0.0));
  std::vector<std::vector<double>> rhs(h.state_dim, std::vector<double>(k, 0.0));
  auto weight = [](std::size_t t) { return (t == 0 || t == 39) ? 1.0 : 2.0; };
  for (std::size_t t = 0; t < 40; ++t) {
    std::vector<double> f{enc.mean(t, 0), enc.mean(t, 1), 1.0};
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = 0; b < k; ++b) A[a][b] += weight(t) * f[a] * f[b];
      for (std::size_t j = 0; j < h.state_dim; ++j) rhs[j][a] += weight(t) * f[a] * xn(t, j);
    }
  }
  double best = 0.0;
  for (std::size_t j = 0; j < h.state_dim; ++j) {
    auto coef = solve_dense(A, rhs[j]);
    for (std::size_t t = 0; t < 40; ++t) {
      const double pred = coef[0] * enc.mean(t, 0) + coef[1] * enc.mean(t, 1) + coef[2];
      best += weight(t) * std::pow(pred - xn(t, j), 2);
    }
  }
  best /= double(78 * h.state_dim);

  TrainSchedule s;
  s.epochs = 3000;
  s.batch = 64;
  s.learning_rate = 1e-2;
  s.monitor_windows = 40;
  Rng train_rng(1);
  auto rep = train(model, data, {}, s, train_rng);
  const double got = rep.monitor_loss.back();
  INFO("trained " << got << " optimum " << best);
  CHECK(got >= best * (1.0 - 1e-9));
  CHECK(got <= best * 1.01 + 1e-12);
}

TEST_CASE("checkpoint round trip and corruption") {
  const auto dir = testutil::scratch_dir("ckpt");
  std::vector<TrainingSeries> data{toy_series(100, 10, 12)};
  RomModel m = mini_model(31, data);
  m.frozen.decoder = true;
  save_checkpoint(dir / "m.ckpt", m);
  RomModel back = load_checkpoint(dir / "m.ckpt");
  CHECK(same_params(all_params(back), all_params(m)));
  CHECK(back.norm.mean == m.norm.mean);
  CHECK(back.norm.scale == m.norm.scale);
  CHECK(back.frozen.decoder);
  CHECK(!back.frozen.encoder);
  CHECK(back.hyper.encoder_hidden == m.hyper.encoder_hidden);
  CHECK(back.hyper.heads == 2);

  {
    std::ofstream os(dir / "bad.ckpt", std::ios::binary);
    os << "WRCKPT01garbage";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), IoError);
  CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt"), IoError);

  std::ifstream is(dir / "m.ckpt", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  bytes.resize(bytes.size() - 100);
  {
    std::ofstream os(dir / "short.ckpt", std::ios::binary);
    os << bytes;
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt"), IoError);
}

TEST_CASE("hyperparameter validation names the field") {
  RomHyper h = mini_hyper();
  h.d_model = 7;
  try {
    h.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("rom.d_model") != std::string::npos);
  }
  h = mini_hyper();
  h.learning_rate = 0.0;
  CHECK_THROWS_AS(h.validate(), ConfigError);
}
