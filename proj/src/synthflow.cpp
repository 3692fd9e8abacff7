/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#include "wakerom/synthflow.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "json.hpp"
#include "wakerom/error.hpp"
#include "wakerom/serialize.hpp"

namespace wakerom::synthflow {

namespace {

void require(bool ok, const char* field, const std::string& why) {
  if (!ok) throw ConfigError(std::string("flow.") + field + ": " + why);
}

std::string xi_file_name(double xi) {
  std::ostringstream os;
  os << "xi_" << std::fixed << std::setprecision(3) << xi << ".rmx";
  return os.str();
}

}  // namespace

void FlowConfig::validate() const {
  require(std::isfinite(xi) && xi > 0.0, "xi", "must be positive");
  require(std::isfinite(xi_c), "xi_c", "must be finite");
  require(std::isfinite(alpha), "alpha", "must be finite");
  require(dt > 0.0 && std::isfinite(dt), "dt", "must be positive");
  require(steps >= 2, "steps", "need at least two snapshots");
  require(nx * ny >= 4, "nx", "grid needs at least four points");
  require(nx >= 2 && ny >= 2, "ny", "each grid direction needs two points");
  require(r0 > 0.0 && std::isfinite(r0), "r0", "must be positive");
  require(lx > 0.0 && ly > 0.0, "lx", "domain extents must be positive");
  require(sigma_x > 0.0 && sigma_y > 0.0, "sigma_x", "envelope widths must be positive");
}

FlowModes flow_modes(const FlowConfig& c) {
  const std::size_t n = c.grid_points();
  FlowModes m;
  for (auto* v : {&m.x, &m.y, &m.envelope, &m.base, &m.phi1, &m.phi2, &m.phi3, &m.psi1, &m.psi2}) v->resize(n);
  for (std::size_t iy = 0; iy < c.ny; ++iy) {
    const double y = -0.5 * c.ly + c.ly * static_cast<double>(iy) / static_cast<double>(c.ny - 1);
    for (std::size_t ix = 0; ix < c.nx; ++ix) {
      const double x = c.lx * static_cast<double>(ix) / static_cast<double>(c.nx - 1);
      const std::size_t k = iy * c.nx + ix;
      const double ex = (x - c.x0) / c.sigma_x;
      const double ey = y / c.sigma_y;
      const double e = std::exp(-ex * ex - ey * ey);
      const double s = std::sin(c.kappa * x);
      const double co = std::cos(c.kappa * x);
      const double shear = 2.0 * y / c.sigma_y;
      m.x[k] = x;
      m.y[k] = y;
      m.envelope[k] = e;
      m.base[k] = 1.0 - std::exp(-(x * x + y * y) / 0.5);
      m.phi1[k] = e * s;
      m.phi2[k] = e * co;
      m.phi3[k] = -0.3 * e;
      m.psi1[k] = e * s * shear;
      m.psi2[k] = e * co * shear;
    }
  }
  return m;
}

HopfTrajectory integrate_hopf(const FlowConfig& c) {
  c.validate();
  const double mu = c.growth_rate();
  const double omega = c.frequency();
  auto rhs = [mu](double r) { return mu * r - r * r * r; };
  HopfTrajectory tr;
  tr.times.resize(c.steps);
  tr.radius.resize(c.steps);
  tr.phase.resize(c.steps);
  double r = c.r0;
  double theta = 0.0;
  for (std::size_t k = 0; k < c.steps; ++k) {
    tr.times[k] = static_cast<double>(k) * c.dt;
    tr.radius[k] = r;
    tr.phase[k] = theta;
    const double k1 = rhs(r);
    const double k2 = rhs(r + 0.5 * c.dt * k1);
    const double k3 = rhs(r + 0.5 * c.dt * k2);
    const double k4 = rhs(r + c.dt * k3);
    r += c.dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    theta += c.dt * omega;  // RK4 is exact for a constant rate
    if (!std::isfinite(r)) {
      throw NumericError("synthflow: radius became non-finite at step " + std::to_string(k + 1));
    }
  }
  return tr;
}

SnapshotSet simulate(const FlowConfig& c) {
  const auto traj = integrate_hopf(c);
  const auto modes = flow_modes(c);
  const std::size_t n = c.grid_points();
  SnapshotSet out;
  out.xi = c.xi;
  out.times = traj.times;
  out.states = Tensor({c.steps, 2 * n});
  for (std::size_t k = 0; k < c.steps; ++k) {
    const double r = traj.radius[k];
    const double a = r * std::cos(traj.phase[k]);
    const double b = r * std::sin(traj.phase[k]);
    auto row = out.states.row(k);
    for (std::size_t p = 0; p < n; ++p) {
      row[p] = modes.base[p] + a * modes.phi1[p] + b * modes.phi2[p] + r * r * modes.phi3[p];
      row[n + p] = a * modes.psi2[p] - b * modes.psi1[p];
    }
  }
  return out;
}

double energy_bound(const FlowConfig& c) {
  const double mu = c.growth_rate();
  const double rmax = std::max(c.r0, mu > 0.0 ? std::sqrt(mu) : 0.0);
  const auto m = flow_modes(c);
  double bound = 0.0;
  for (std::size_t p = 0; p < c.grid_points(); ++p) {
    const double u = std::abs(m.base[p]) + rmax * (std::abs(m.phi1[p]) + std::abs(m.phi2[p])) +
                     rmax * rmax * std::abs(m.phi3[p]);
    const double v = rmax * (std::abs(m.psi1[p]) + std::abs(m.psi2[p]));
    bound += u * u + v * v;
  }
  return bound;
}

std::vector<double> kinetic_energy(const Tensor& states) {
  if (states.rank() != 2 || states.cols() % 2 != 0) {
    throw ShapeError("kinetic_energy: state width must be even, got " + dims_to_string(states.dims()));
  }
  const std::size_t n = states.cols() / 2;
  std::vector<double> k(states.rows(), 0.0);
  for (std::size_t t = 0; t < states.rows(); ++t) {
    auto row = states.row(t);
    double s = 0.0;
    for (std::size_t p = 0; p < n; ++p) s += row[p] * row[p] + row[n + p] * row[n + p];
    k[t] = s;
  }
  return k;
}

EnergySignal kinetic_energy(const SnapshotSet& s) { return {s.xi, kinetic_energy(s.states)}; }

std::pair<SnapshotSet, SnapshotSet> split_even_odd(const SnapshotSet& s) {
  if (s.count() < 2) throw ContractError("split_even_odd: need at least two snapshots");
  std::vector<std::size_t> even, odd;
  for (std::size_t k = 0; k < s.count(); ++k) (k % 2 == 0 ? even : odd).push_back(k);
  auto pick = [&](const std::vector<std::size_t>& idx) {
    SnapshotSet out;
    out.xi = s.xi;
    out.states = take_rows(s.states, idx);
    for (auto k : idx) out.times.push_back(s.times[k]);
    return out;
  };
  return {pick(even), pick(odd)};
}

std::vector<CorpusEntry> Corpus::by_split(const std::string& split) const {
  std::vector<CorpusEntry> out;
  for (const auto& e : entries)
    if (e.split == split) out.push_back(e);
  return out;
}

SnapshotSet Corpus::load(const CorpusEntry& entry) const {
  SnapshotSet s;
  s.xi = entry.xi;
  s.states = load_rmx(dir / entry.path);
  if (s.states.dims() != entry.dims) {
    throw IoError((dir / entry.path).string() + ": dims " + dims_to_string(s.states.dims()) +
                  " disagree with manifest " + dims_to_string(entry.dims));
  }
  for (std::size_t k = 0; k < s.count(); ++k) s.times.push_back(static_cast<double>(k) * entry.dt);
  return s;
}

Corpus build_corpus(const std::vector<double>& xi_train, const std::vector<double>& xi_eval,
                    const FlowConfig& flow_template, const std::filesystem::path& dir) {
  if (xi_train.empty() && xi_eval.empty()) throw ContractError("build_corpus: no parameter values given");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  Corpus corpus;
  corpus.dir = dir;
  corpus.flow = flow_template;
  std::map<double, CorpusEntry> written;
  auto add = [&](double xi, const char* split) {
    auto it = written.find(xi);
    if (it == written.end()) {
      FlowConfig c = flow_template;
      c.xi = xi;
      c.validate();
      const auto snaps = simulate(c);
      CorpusEntry e{xi, xi_file_name(xi), snaps.states.dims(), c.dt, ""};
      save_rmx(dir / e.path, snaps.states);
      it = written.emplace(xi, e).first;
    }
    CorpusEntry e = it->second;
    e.split = split;
    corpus.entries.push_back(e);
  };
  for (double xi : xi_train) add(xi, "train");
  for (double xi : xi_eval) add(xi, "eval");

  nlohmann::json manifest;
  manifest["flow"] = flow_template;
  manifest["datasets"] = nlohmann::json::array();
  for (const auto& e : corpus.entries) {
    manifest["datasets"].push_back({{"xi", e.xi}, {"path", e.path}, {"dims", e.dims}, {"dt", e.dt}, {"split", e.split}});
  }
  std::ofstream os(dir / "corpus.json");
  if (!os) throw IoError("cannot write " + (dir / "corpus.json").string());
  os << manifest.dump(2) << '\n';
  return corpus;
}

Corpus load_corpus(const std::filesystem::path& dir) {
  const auto path = dir / "corpus.json";
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  Corpus corpus;
  corpus.dir = dir;
  corpus.flow = j.at("flow").get<FlowConfig>();
  for (const auto& d : j.at("datasets")) {
    corpus.entries.push_back({d.at("xi").get<double>(), d.at("path").get<std::string>(), d.at("dims").get<Dims>(),
                              d.at("dt").get<double>(), d.at("split").get<std::string>()});
  }
  return corpus;
}

}  // namespace wakerom::synthflow
