/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

// Command-line front end. Talks to the library only through the C API.

#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "wakerom/wakerom.h"

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitValidation = 2;

int exit_code(wr_status s) {
  if (s == WR_OK) return 0;
  return s == WR_ERR_CONFIG ? kExitValidation : kExitRuntime;
}

int report(wr_status s) {
  if (s != WR_OK) std::fprintf(stderr, "wakerom: %s: %s\n", wr_status_name(s), wr_last_error());
  return exit_code(s);
}

void log_line(const char* line, void*) {
  std::fprintf(stderr, "%s\n", line);
  std::fflush(stderr);
}

struct Overrides {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::string error;
};

// Accepts "--a.b=v" and "--a.b v".
Overrides parse_extras(const std::vector<std::string>& extras) {
  Overrides o;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const auto& arg = extras[i];
    if (arg.rfind("--", 0) != 0 || arg.size() <= 2) {
      o.error = "unexpected argument '" + arg + "'";
      return o;
    }
    const auto body = arg.substr(2);
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      o.pairs.emplace_back(body.substr(0, eq), body.substr(eq + 1));
    } else if (i + 1 < extras.size()) {
      o.pairs.emplace_back(body, extras[++i]);
    } else {
      o.error = "missing value for '" + arg + "'";
      return o;
    }
  }
  return o;
}

struct Pipeline {
  wr_pipeline* p = nullptr;
  ~Pipeline() { wr_pipeline_destroy(p); }
};

int run(const std::vector<std::string>& stages, const std::string& config, const std::string& output,
        const std::vector<std::string>& extras, bool print_config) {
  const auto ov = parse_extras(extras);
  if (!ov.error.empty()) {
    std::fprintf(stderr, "wakerom: %s\n", ov.error.c_str());
    return kExitValidation;
  }
  Pipeline pl;
  if (auto s = wr_pipeline_create(config.c_str(), &pl.p); s != WR_OK) return report(s);
  for (const auto& [k, v] : ov.pairs)
    if (auto s = wr_pipeline_override(pl.p, k.c_str(), v.c_str()); s != WR_OK) return report(s);
  if (!output.empty())
    if (auto s = wr_pipeline_override(pl.p, "output_dir", ("\"" + output + "\"").c_str()); s != WR_OK) return report(s);
  if (auto s = wr_pipeline_validate(pl.p); s != WR_OK) return report(s);
  if (print_config) {
    std::size_t n = 0;
    wr_pipeline_config_json(pl.p, nullptr, 0, &n);
    std::string buf(n + 1, '\0');
    if (auto s = wr_pipeline_config_json(pl.p, buf.data(), buf.size(), &n); s != WR_OK) return report(s);
    std::printf("%s\n", buf.c_str());
    return 0;
  }
  wr_pipeline_set_log(pl.p, log_line, nullptr);
  std::size_t n = 0;
  wr_pipeline_run_dir(pl.p, nullptr, 0, &n);
  std::string dir(n + 1, '\0');
  wr_pipeline_run_dir(pl.p, dir.data(), dir.size(), &n);
  dir.resize(n);
  for (const auto& stage : stages) {
    std::fprintf(stderr, "[%s] %s\n", stage.c_str(), dir.c_str());
    if (auto s = wr_pipeline_run_stage(pl.p, stage.c_str()); s != WR_OK) return report(s);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parametric wake reduced-order model with ensemble data assimilation"};
  app.set_version_flag("--version", std::string(wr_version()));
  app.require_subcommand(1);

  std::string config, output;
  bool print_config = false;
  std::vector<std::string> stages;
  for (std::size_t i = 0; i < wr_stage_count(); ++i) stages.emplace_back(wr_stage_name(i));

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config, "JSON config file (defaults when omitted)");
    sub->add_option("-o,--output", output, "Run directory, relative to $WAKEROM_OUTPUT_ROOT when set");
    sub->allow_extras();
    sub->footer("Any config field can be overridden with --<dotted.key>=<value>, e.g. --rom.epochs=50.");
  };

  std::vector<CLI::App*> subs;
  for (const auto& s : stages) {
    auto* sub = app.add_subcommand(s, "Run the " + s + " stage");
    add_common(sub);
    subs.push_back(sub);
  }
  auto* all = app.add_subcommand("all", "Run every stage in order");
  add_common(all);
  auto* show = app.add_subcommand("config", "Print the effective config");
  add_common(show);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  try {
    for (std::size_t i = 0; i < subs.size(); ++i) {
      if (subs[i]->parsed()) return run({stages[i]}, config, output, subs[i]->remaining(), false);
    }
    if (all->parsed()) return run(stages, config, output, all->remaining(), false);
    print_config = show->parsed();
    return run({}, config, output, show->remaining(), print_config);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "wakerom: %s\n", e.what());
    return kExitRuntime;
  }
}
