/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "svg.hpp"
#include "test_util.hpp"
#include "wakerom/error.hpp"
#include "wakerom/pipeline.hpp"

using namespace wakerom;
using namespace wakerom::pipeline;
namespace fs = std::filesystem;

namespace {

PipelineConfig tiny_config(const fs::path& dir) {
  PipelineConfig c;
  c.flow.nx = 6;
  c.flow.ny = 4;
  c.flow.steps = 60;
  c.rom.encoder_hidden = {16, 8};
  c.rom.decoder_hidden = {8, 16};
  c.rom.d_model = 8;
  c.rom.heads = 2;
  c.rom.ff_hidden = 16;
  c.rom.xi_tokens = 2;
  c.rom.lookback = 3;
  c.rom.horizon = 2;
  c.rom.epochs = 2;
  c.rom.batch = 4;
  c.xi_eval = {100.0, 120.0, 140.0};
  c.sensors = 4;
  c.ensemble = 8;
  c.ks_stride = 5;
  c.finetune.epochs = 1;
  c.output_dir = dir.string();
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string config_error(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "<no ConfigError>";
}

std::size_t count_of(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("config survives a JSON round trip") {
  Rng rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    PipelineConfig c;
    c.flow.xi_c = rng.uniform(40.0, 70.0);
    c.flow.nx = 4 + rng.below(30);
    c.flow.dt = rng.uniform(0.01, 0.1);
    c.rom.latent = 1 + rng.below(6);
    c.rom.encoder_hidden = {std::size_t(8 + rng.below(64))};
    c.rom.beta_kl = rng.uniform(0.0, 1e-2);
    c.xi_train = {rng.uniform(80, 100), rng.uniform(100, 140)};
    c.xi_target = rng.uniform(80, 140);
    c.epsilon = rng.uniform(1e-6, 1e-2);
    c.finetune.mode = trial % 3 == 0 ? "full" : trial % 3 == 1 ? "vae_only" : "vae_only_da";
    c.finetune.final_lr_fraction = rng.uniform(0.01, 1.0);
    c.seeds.train = rng.next_u32() * 4294967296ULL + rng.next_u32();
    c.seeds.ks = rng.next_u32();
    c.output_dir = "out" + std::to_string(trial);

    const nlohmann::json j = c;
    const auto back = nlohmann::json::parse(j.dump()).get<PipelineConfig>();
    CHECK(nlohmann::json(back).dump() == j.dump());
    CHECK(back.seeds.train == c.seeds.train);
    CHECK(back.flow.dt == c.flow.dt);
    CHECK(back.xi_target == c.xi_target);
    CHECK(back.rom.encoder_hidden == c.rom.encoder_hidden);
    CHECK(config_hash(back) == config_hash(c));
  }
}

TEST_CASE("shipped default config matches the built-in defaults") {
  const auto path = fs::path(WAKEROM_SOURCE_DIR) / "configs" / "default.json";
  REQUIRE(fs::exists(path));
  const auto c = load_config(path);
  CHECK(nlohmann::json(c).dump() == nlohmann::json(PipelineConfig{}).dump());
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("dotted overrides") {
  PipelineConfig c;
  apply_override(c, "rom.epochs", "50");
  CHECK(c.rom.epochs == 50);
  apply_override(c, "xi_eval", "[100, 140]");
  CHECK(c.xi_eval == std::vector<double>{100.0, 140.0});
  apply_override(c, "finetune.mode", "full");  // not JSON, taken as a string
  CHECK(c.finetune.mode == "full");
  apply_override(c, "seeds.ks", "12");
  CHECK(c.seeds.ks == 12);

  CHECK(config_error([&] { apply_override(c, "rom.epoch", "5"); }).find("rom.epoch") != std::string::npos);
  CHECK(config_error([&] { apply_override(c, "nothing", "5"); }).find("nothing: unknown key") != std::string::npos);
  CHECK(config_error([&] { apply_override(c, "rom.epochs", "many"); }).find("rom.epochs: wrong type") !=
        std::string::npos);
  CHECK(config_error([&] { apply_override(c, "rom.epochs.x", "1"); }).find("unknown key") != std::string::npos);
}

TEST_CASE("validation names the offending field") {
  const auto msg = [](auto mutate) {
    PipelineConfig c;
    mutate(c);
    return config_error([&] { c.validate(); });
  };
  CHECK_NOTHROW(PipelineConfig{}.validate());
  CHECK(msg([](auto& c) { c.sensors = 0; }).rfind("sensors:", 0) == 0);
  CHECK(msg([](auto& c) { c.epsilon = -1.0; }).rfind("epsilon:", 0) == 0);
  CHECK(msg([](auto& c) { c.ensemble = 4; }).rfind("ensemble:", 0) == 0);
  CHECK(msg([](auto& c) { c.ks_stride = 0; }).rfind("ks_stride:", 0) == 0);
  CHECK(msg([](auto& c) { c.xi_train = {}; }).rfind("xi_train:", 0) == 0);
  CHECK(msg([](auto& c) { c.xi_eval = {100.0, 100.0}; }).rfind("xi_eval:", 0) == 0);
  CHECK(msg([](auto& c) { c.finetune.mode = "half"; }).rfind("finetune.mode:", 0) == 0);
  CHECK(msg([](auto& c) { c.finetune.replay_fraction = 1.0; }).rfind("finetune.replay_fraction:", 0) == 0);
  CHECK(msg([](auto& c) { c.finetune.final_lr_fraction = 0.0; }).rfind("finetune.final_lr_fraction:", 0) == 0);
  CHECK(msg([](auto& c) { c.rom.heads = 3; }).rfind("rom.", 0) == 0);
  CHECK(msg([](auto& c) { c.flow.nx = 0; }).rfind("flow.", 0) == 0);
  CHECK(msg([](auto& c) { c.flow.steps = 10; }).rfind("flow.steps:", 0) == 0);
  CHECK(msg([](auto& c) { c.output_dir.clear(); }).rfind("output_dir:", 0) == 0);
}

TEST_CASE("unknown keys in a config file are rejected") {
  const auto dir = testutil::scratch_dir("pipeline_cfg");
  std::ofstream(dir / "a.json") << R"({"rom": {"epochs": 3}, "colour": 1})";
  std::ofstream(dir / "b.json") << R"({"finetune": {"epochs": 3, "rate": 1}})";
  std::ofstream(dir / "c.json") << R"({"rom": {"epochs": 7}})";
  CHECK(config_error([&] { load_config(dir / "a.json"); }).find("config.colour") != std::string::npos);
  CHECK(config_error([&] { load_config(dir / "b.json"); }).find("finetune.rate") != std::string::npos);
  CHECK(config_error([&] { load_config(dir / "missing.json"); }).find("cannot open") != std::string::npos);
  const auto c = load_config(dir / "c.json");
  CHECK(c.rom.epochs == 7);
  CHECK(c.rom.latent == PipelineConfig{}.rom.latent);
}

TEST_CASE("config hash ignores the output directory only") {
  PipelineConfig a, b;
  b.output_dir = "elsewhere";
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  b.seeds.forecast += 1;
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("run directory honours the output root") {
  PipelineConfig c;
  c.output_dir = "runs/a";
  ::setenv("WAKEROM_OUTPUT_ROOT", "/tmp/root", 1);
  CHECK(run_directory(c) == fs::path("/tmp/root/runs/a"));
  c.output_dir = "/abs/dir";
  CHECK(run_directory(c) == fs::path("/abs/dir"));
  ::unsetenv("WAKEROM_OUTPUT_ROOT");
  c.output_dir = "runs/a";
  CHECK(run_directory(c) == fs::path("runs/a"));
}

TEST_CASE("ensemble energy is the member average of summed squares") {
  // T = 2, N = 2, m = 3
  Tensor s({2, 2, 3}, {1, 2, 2, 0, 0, 3, 1, 1, 1, 2, 0, 0});
  const auto f = rom::ensemble_from_samples(100.0, s);
  const auto e = ensemble_energy(f);
  REQUIRE(e.size() == 2);
  CHECK(e[0] == doctest::Approx((9.0 + 9.0) / 2.0));
  CHECK(e[1] == doctest::Approx((3.0 + 4.0) / 2.0));
}

TEST_CASE("KS sweep counts match direct tests") {
  Rng rng(8);
  const std::size_t T = 7, N = 12, m = 5;
  Tensor s({T, N, m});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        // Component 4 is heavily skewed, component 3 constant.
        const double z = rng.normal();
        s[(t * N + i) * m + j] = j == 4 ? std::exp(3.0 * z) : j == 3 ? 2.5 : z;
      }
  const auto f = rom::ensemble_from_samples(120.0, s);
  Rng nr(2);
  const metrics::KsNull null(N, nr, 500);
  const auto sum = ks_sweep(f, 3, null);

  KsSummary want;
  for (std::size_t t = 0; t < T; t += 3)
    for (std::size_t j = 0; j < m; ++j) {
      std::vector<double> col;
      for (std::size_t i = 0; i < N; ++i) col.push_back(s[(t * N + i) * m + j]);
      const auto r = null.test(col);
      ++want.tested;
      want.not_rejected += !r.reject;
      want.degenerate += r.degenerate;
    }
  CHECK(sum.tested == 3 * m);
  CHECK(sum.tested == want.tested);
  CHECK(sum.not_rejected == want.not_rejected);
  CHECK(sum.degenerate == 3);
  CHECK(sum.degenerate == want.degenerate);

  Rng nr2(2);
  const metrics::KsNull wrong(N + 1, nr2, 50);
  CHECK_THROWS_AS(ks_sweep(f, 3, wrong), ContractError);
  CHECK_THROWS_AS(ks_sweep(f, 0, null), ContractError);
}

TEST_CASE("charts are well-formed text") {
  const auto line = svg::line_chart("a < b & c", "x", "y",
                                    {{"one", "#000", {0, 1, 2}, {1, 4, 9}}, {"two", "#f00", {0, 1}, {2, 2}}});
  CHECK(line.rfind("<svg", 0) == 0);
  CHECK(line.find("</svg>") != std::string::npos);
  CHECK(count_of(line, "<polyline") == 2);
  CHECK(line.find("a &lt; b &amp; c") != std::string::npos);
  CHECK(line.find("nan") == std::string::npos);

  const auto bars = svg::bar_chart("t", {"p", "q", "r"}, {{"g1", "#111", {1, 2, 3}}, {"g2", "#222", {0, -1, 2}}});
  // background + legend swatches + bars
  CHECK(count_of(bars, "<rect") == 1 + 2 + 6);

  const auto grid = svg::grid_overlay("g", 3, 2, {0, 1, 2, 3, 4, 5}, {{0, 0, "#f00"}, {2, 1, "#0f0"}});
  CHECK(count_of(grid, "<rect") == 1 + 6);
  CHECK(count_of(grid, "<circle") == 2);

  // Degenerate inputs must not produce non-finite coordinates.
  const auto flat = svg::line_chart("flat", "x", "y", {{"c", "#000", {1, 1}, {5, 5}}});
  CHECK(flat.find("nan") == std::string::npos);
  CHECK(flat.find("inf") == std::string::npos);
}

TEST_CASE("stages fail cleanly without their inputs") {
  const auto dir = testutil::scratch_dir("pipeline_missing");
  const auto c = tiny_config(dir);
  CHECK(config_error([&] { run_stage(c, "train"); }).find("generate") != std::string::npos);
  CHECK(config_error([&] { run_stage(c, "evaluate"); }).find("missing input") != std::string::npos);
  CHECK(config_error([&] { run_stage(c, "report"); }).find("missing input") != std::string::npos);
  CHECK(config_error([&] { run_stage(c, "fly"); }).find("unknown stage") != std::string::npos);
  auto bad = c;
  bad.sensors = 0;
  CHECK(config_error([&] { run_stage(bad, "generate"); }).rfind("sensors:", 0) == 0);
}

TEST_CASE("end to end: manifest, determinism and stage isolation") {
  const auto base = testutil::scratch_dir("pipeline_e2e");
  const auto c1 = tiny_config(base / "one");
  const auto c2 = tiny_config(base / "two");
  std::vector<std::string> lines;
  run_all(c1, [&](const std::string& s) { lines.push_back(s); });
  run_all(c2);
  CHECK(!lines.empty());

  const auto manifest = nlohmann::json::parse(slurp(base / "one" / "manifest.json"));
  CHECK(manifest.at("config_hash") == config_hash(c1));
  CHECK(manifest.at("config").get<PipelineConfig>().rom.epochs == c1.rom.epochs);
  CHECK(manifest.at("versions").contains("wakerom"));
  for (const auto& s : kStages) {
    REQUIRE(manifest.at("stages").contains(s));
    const auto& st = manifest["stages"][s];
    CHECK(st.at("seconds").get<double>() >= 0.0);
    CHECK(!st.at("artifacts").empty());
    for (const auto& a : st.at("artifacts")) CHECK(fs::exists(base / "one" / a.get<std::string>()));
  }

  // Every CSV and SVG is byte-identical across the two runs.
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(base / "one")) {
    const auto ext = e.path().extension();
    if (ext != ".csv" && ext != ".svg" && ext != ".rmx" && ext != ".ckpt") continue;
    const auto rel = fs::relative(e.path(), base / "one");
    CHECK_MESSAGE(slurp(e.path()) == slurp(base / "two" / rel), rel.string());
    ++compared;
  }
  CHECK(compared > 20);

  // Rerunning later stages with unchanged inputs reproduces their outputs.
  const auto before_eval = slurp(base / "one" / "eval" / "metrics.csv");
  const auto before_assim = slurp(base / "one" / "assim" / "error.csv");
  const auto before_ft = slurp(base / "one" / "finetune" / "comparison.csv");
  run_stage(c1, "evaluate");
  run_stage(c1, "assimilate");
  run_stage(c1, "finetune");
  CHECK(slurp(base / "one" / "eval" / "metrics.csv") == before_eval);
  CHECK(slurp(base / "one" / "assim" / "error.csv") == before_assim);
  CHECK(slurp(base / "one" / "finetune" / "comparison.csv") == before_ft);

  // The evaluation table covers every value and metric.
  const auto csv = slurp(base / "one" / "eval" / "metrics.csv");
  CHECK(csv.rfind("metric,xi,value\n", 0) == 0);
  CHECK(count_of(csv, "\nw2,") == c1.xi_eval.size());
  CHECK(count_of(csv, "\nuq,") == c1.xi_eval.size());
  const auto summary = nlohmann::json::parse(slurp(base / "one" / "eval" / "summary.json"));
  CHECK(summary.at("ks").at("tested").get<std::size_t>() > 0);
}

TEST_CASE("finetune trains on truth for the non-assimilation variants") {
  const auto dir = testutil::scratch_dir("pipeline_full");
  auto c = tiny_config(dir);
  c.finetune.mode = "full";
  for (const char* s : {"generate", "train", "finetune"}) run_stage(c, s);  // no assimilation needed
  CHECK(fs::exists(dir / "model" / "finetuned.ckpt"));
  const auto m0 = rom::load_checkpoint(dir / "model" / "init.ckpt");
  const auto m1 = rom::load_checkpoint(dir / "model" / "finetuned.ckpt");
  bool moved = false;
  for (const auto& [name, t] : m0.transformer) {
    const auto a = t.data(), b = m1.transformer.at(name).data();
    moved = moved || !std::equal(a.begin(), a.end(), b.begin());
  }
  CHECK(moved);
}
