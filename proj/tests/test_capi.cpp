/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

// Links against the shared library only; nothing from the C++ headers.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "wakerom/wakerom.h"

namespace fs = std::filesystem;

namespace {

struct Handle {
  wr_pipeline* p = nullptr;
  ~Handle() { wr_pipeline_destroy(p); }
};

std::string get_string(wr_status (*fn)(const wr_pipeline*, char*, size_t, size_t*), const wr_pipeline* p) {
  size_t n = 0;
  REQUIRE(fn(p, nullptr, 0, &n) == WR_OK);
  std::string s(n + 1, '\0');
  REQUIRE(fn(p, s.data(), s.size(), &n) == WR_OK);
  s.resize(n);
  return s;
}

void tiny(wr_pipeline* p, const std::string& dir) {
  const char* kv[][2] = {{"flow.nx", "6"},           {"flow.ny", "4"},           {"flow.steps", "60"},
                         {"rom.encoder_hidden", "[8]"}, {"rom.decoder_hidden", "[8]"}, {"rom.d_model", "8"},
                         {"rom.heads", "2"},         {"rom.ff_hidden", "8"},     {"rom.xi_tokens", "2"},
                         {"rom.lookback", "3"},      {"rom.horizon", "2"},       {"rom.epochs", "1"},
                         {"rom.batch", "4"},         {"xi_eval", "[120, 140]"},  {"sensors", "4"},
                         {"ensemble", "8"},          {"finetune.epochs", "1"}};
  for (auto& [k, v] : kv) REQUIRE(wr_pipeline_override(p, k, v) == WR_OK);
  REQUIRE(wr_pipeline_override(p, "output_dir", ("\"" + dir + "\"").c_str()) == WR_OK);
}

}  // namespace

TEST_CASE("status names and version") {
  CHECK(std::string(wr_version()).size() > 0);
  CHECK(std::string(wr_status_name(WR_OK)) == "ok");
  CHECK(std::string(wr_status_name(WR_ERR_CONFIG)) == "config error");
  CHECK(std::string(wr_status_name(static_cast<wr_status>(99))) == "unknown status");
  CHECK(wr_stage_count() == 7);
  CHECK(std::string(wr_stage_name(0)) == "generate");
  CHECK(std::string(wr_stage_name(6)) == "report");
  CHECK(wr_stage_name(7) == nullptr);
}

TEST_CASE("metrics through the C interface") {
  const double a[] = {0.0, 1.0, 2.0, 3.0}, b[] = {1.0, 2.0, 3.0, 4.0};
  double w = -1.0;
  REQUIRE(wr_wasserstein2(a, 4, b, 4, &w) == WR_OK);
  CHECK(w == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(std::string(wr_last_error()).empty());

  double rel = 0.0;
  REQUIRE(wr_relative_error(a, b, 4, 1, &rel) == WR_OK);
  CHECK(rel == doctest::Approx(100.0 * 4.0 / 10.0));
  CHECK(wr_relative_error(a, b, 4, 3, &rel) == WR_ERR_ARGUMENT);
  CHECK(wr_relative_error(b, a, 4, 1, &rel) == WR_OK);
  const double zero[] = {0, 0, 0, 0};
  CHECK(wr_relative_error(a, zero, 4, 2, &rel) == WR_ERR_CONTRACT);

  double rho = 0.0;
  REQUIRE(wr_rank_correlation(a, b, 4, &rho) == WR_OK);
  CHECK(rho == doctest::Approx(1.0));
  const double flat[] = {2, 2, 2, 2};
  CHECK(wr_rank_correlation(a, flat, 4, &rho) == WR_ERR_CONTRACT);
  CHECK(std::string(wr_last_error()).find("constant") != std::string::npos);

  const double sigma[] = {2.0, 0.5, 0.5, 1.0};
  double lambda[2] = {0, 0};
  REQUIRE(wr_kl_diag_optimum(sigma, 2, lambda) == WR_OK);
  CHECK(lambda[0] == 2.0);
  CHECK(lambda[1] == 1.0);
  const double indefinite[] = {1.0, 2.0, 2.0, 1.0};
  CHECK(wr_kl_diag_optimum(indefinite, 2, lambda) == WR_ERR_CONTRACT);
}

TEST_CASE("null arguments are reported, not dereferenced") {
  double out = 0.0;
  const double a[] = {1.0};
  CHECK(wr_wasserstein2(nullptr, 1, a, 1, &out) == WR_ERR_ARGUMENT);
  CHECK(std::string(wr_last_error()).find("must not be null") != std::string::npos);
  CHECK(wr_wasserstein2(a, 1, a, 1, nullptr) == WR_ERR_ARGUMENT);
  CHECK(wr_pipeline_create(nullptr, nullptr) == WR_ERR_ARGUMENT);
  CHECK(wr_pipeline_validate(nullptr) == WR_ERR_ARGUMENT);
  CHECK(wr_pipeline_run_stage(nullptr, "generate") == WR_ERR_ARGUMENT);
  CHECK(wr_model_load(nullptr, nullptr) == WR_ERR_ARGUMENT);
  wr_pipeline_destroy(nullptr);
  wr_model_destroy(nullptr);
}

TEST_CASE("pipeline handle: config, overrides and string buffers") {
  Handle h;
  REQUIRE(wr_pipeline_create(nullptr, &h.p) == WR_OK);
  REQUIRE(h.p != nullptr);
  CHECK(wr_pipeline_validate(h.p) == WR_OK);

  const auto hash0 = get_string(wr_pipeline_config_hash, h.p);
  CHECK(hash0.size() == 16);
  REQUIRE(wr_pipeline_override(h.p, "rom.epochs", "7") == WR_OK);
  CHECK(get_string(wr_pipeline_config_hash, h.p) != hash0);
  CHECK(get_string(wr_pipeline_config_json, h.p).find("\"epochs\": 7") != std::string::npos);

  CHECK(wr_pipeline_override(h.p, "rom.nope", "1") == WR_ERR_CONFIG);
  CHECK(std::string(wr_last_error()).find("rom.nope") != std::string::npos);
  REQUIRE(wr_pipeline_override(h.p, "sensors", "0") == WR_OK);
  CHECK(wr_pipeline_validate(h.p) == WR_ERR_CONFIG);
  CHECK(std::string(wr_last_error()).rfind("sensors:", 0) == 0);

  // Too small buffers are refused and left untouched.
  char small[4] = {'x', 'x', 'x', 'x'};
  size_t n = 0;
  CHECK(wr_pipeline_config_hash(h.p, small, sizeof small, &n) == WR_ERR_ARGUMENT);
  CHECK(n == 16);
  CHECK(small[0] == 'x');
  CHECK(wr_pipeline_config_hash(h.p, nullptr, 0, nullptr) == WR_ERR_ARGUMENT);

  Handle bad;
  CHECK(wr_pipeline_create("/nonexistent/config.json", &bad.p) == WR_ERR_CONFIG);
  CHECK(bad.p == nullptr);
}

namespace {
std::vector<std::string> g_lines;
void collect(const char* line, void* user) {
  ++*static_cast<int*>(user);
  g_lines.emplace_back(line);
}
}  // namespace

TEST_CASE("pipeline stages through the C interface") {
  const auto dir = fs::temp_directory_path() / "wakerom_test_capi";
  fs::remove_all(dir);
  Handle h;
  REQUIRE(wr_pipeline_create("", &h.p) == WR_OK);
  tiny(h.p, dir.string());
  CHECK(get_string(wr_pipeline_run_dir, h.p) == dir.string());

  CHECK(wr_pipeline_run_stage(h.p, "train") == WR_ERR_CONFIG);
  CHECK(std::string(wr_last_error()).find("missing input") != std::string::npos);
  CHECK(wr_pipeline_run_stage(h.p, "launch") == WR_ERR_CONFIG);

  int calls = 0;
  REQUIRE(wr_pipeline_set_log(h.p, collect, &calls) == WR_OK);
  for (std::size_t i = 0; i < wr_stage_count(); ++i) {
    INFO(wr_stage_name(i));
    REQUIRE(wr_pipeline_run_stage(h.p, wr_stage_name(i)) == WR_OK);
  }
  CHECK(calls > 0);
  CHECK(calls == static_cast<int>(g_lines.size()));
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(fs::exists(dir / "report" / "metrics.csv"));

  wr_model* m = nullptr;
  REQUIRE(wr_model_load((dir / "model" / "init.ckpt").c_str(), &m) == WR_OK);
  size_t d = 0, p = 0, L = 0;
  REQUIRE(wr_model_dims(m, &d, &p, &L) == WR_OK);
  CHECK(d == 2 * 6 * 4);
  CHECK(L == 3);
  // First snapshots of the xi = 140 trajectory: "RMX1", u32 rank, u64 dims, doubles.
  std::vector<double> init(L * d), mean(5 * d);
  {
    std::FILE* f = std::fopen((dir / "corpus" / "xi_140.000.rmx").c_str(), "rb");
    REQUIRE(f != nullptr);
    char magic[4];
    std::uint32_t rank = 0;
    std::uint64_t dims[2] = {0, 0};
    REQUIRE(std::fread(magic, 1, 4, f) == 4);
    REQUIRE(std::fread(&rank, sizeof rank, 1, f) == 1);
    REQUIRE(rank == 2);
    REQUIRE(std::fread(dims, sizeof dims[0], 2, f) == 2);
    REQUIRE(dims[1] == d);
    REQUIRE(std::fread(init.data(), sizeof(double), init.size(), f) == init.size());
    std::fclose(f);
  }
  double uq = -1.0;
  REQUIRE(wr_model_forecast(m, init.data(), L, 130.0, 5, 8, 3, &uq, mean.data()) == WR_OK);
  CHECK(uq >= 0.0);
  for (double v : mean) CHECK(std::isfinite(v));
  double uq2 = -1.0;
  REQUIRE(wr_model_forecast(m, init.data(), L, 130.0, 5, 8, 3, &uq2, nullptr) == WR_OK);
  CHECK(uq2 == uq);
  CHECK(wr_model_forecast(m, init.data(), L - 1, 130.0, 5, 8, 3, &uq, nullptr) != WR_OK);
  wr_model_destroy(m);

  wr_model* none = nullptr;
  CHECK(wr_model_load((dir / "absent.ckpt").c_str(), &none) == WR_ERR_IO);
  CHECK(none == nullptr);
}
