/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#include "wakerom/sensing.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"
#include "wakerom/error.hpp"
#include "wakerom/linalg.hpp"

namespace wakerom::sensing {

PodBasis pod_basis(const Tensor& x, std::size_t r, bool subtract_mean) {
  if (x.rank() != 2 || x.size() == 0) throw ShapeError("pod_basis: expected [T, m], got " + dims_to_string(x.dims()));
  const std::size_t T = x.rows(), m = x.cols();
  if (r < 1 || r > std::min(T, m)) {
    throw ContractError("pod_basis: rank " + std::to_string(r) + " outside [1, " + std::to_string(std::min(T, m)) + "]");
  }
  PodBasis basis;
  Tensor work = x;
  if (subtract_mean) {
    basis.mean.assign(m, 0.0);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < m; ++j) basis.mean[j] += x(t, j);
    for (auto& v : basis.mean) v /= static_cast<double>(T);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < m; ++j) work(t, j) -= basis.mean[j];
  }
  // Rows are snapshots, so the spatial modes are the right singular vectors.
  const auto s = linalg::svd(work);
  basis.psi = Tensor({m, r});
  basis.sigma.assign(s.sigma.begin(), s.sigma.begin() + static_cast<std::ptrdiff_t>(r));
  for (std::size_t k = 0; k < r; ++k) {
    std::size_t big = 0;
    for (std::size_t j = 1; j < m; ++j)
      if (std::abs(s.v(j, k)) > std::abs(s.v(big, k))) big = j;
    const double sign = s.v(big, k) < 0.0 ? -1.0 : 1.0;
    for (std::size_t j = 0; j < m; ++j) basis.psi(j, k) = sign * s.v(j, k) * s.sigma[k];
  }
  return basis;
}

Tensor project(const Tensor& x, const PodBasis& basis) {
  if (x.rank() != 2 || x.cols() != basis.dim()) throw ShapeError("project: state width does not match basis");
  const std::size_t r = basis.rank(), m = basis.dim();
  Tensor out(x.dims());
  std::vector<double> a(r);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    auto row = x.row(t);
    for (std::size_t k = 0; k < r; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += (row[j] - (basis.mean.empty() ? 0.0 : basis.mean[j])) * basis.psi(j, k);
      a[k] = s / (basis.sigma[k] * basis.sigma[k]);
    }
    auto dst = out.row(t);
    for (std::size_t j = 0; j < m; ++j) {
      double v = basis.mean.empty() ? 0.0 : basis.mean[j];
      for (std::size_t k = 0; k < r; ++k) v += basis.psi(j, k) * a[k];
      dst[j] = v;
    }
  }
  return out;
}

void SensorLayout::validate() const {
  std::set<std::size_t> seen;
  for (auto i : indices) {
    if (i >= m) throw ContractError("sensor index " + std::to_string(i) + " outside [0, " + std::to_string(m) + ")");
    if (!seen.insert(i).second) throw ContractError("sensor index " + std::to_string(i) + " repeated");
  }
}

PivotedQr pivoted_qr(const Tensor& a, std::size_t count) {
  if (a.rank() != 2) throw ShapeError("pivoted_qr: expected a matrix, got " + dims_to_string(a.dims()));
  const std::size_t r = a.rows(), m = a.cols();
  Tensor w = a;
  std::vector<std::size_t> perm(m);
  for (std::size_t j = 0; j < m; ++j) perm[j] = j;
  PivotedQr out;
  double scale = 0.0;
  for (double v : a.data()) scale = std::max(scale, std::abs(v));
  const double tol = scale * 1e-13;
  std::vector<double> v(r);
  for (std::size_t k = 0; k < std::min({count, r, m}); ++k) {
    std::size_t best = m;
    double best_norm = -1.0;
    for (std::size_t j = k; j < m; ++j) {
      double s = 0.0;
      for (std::size_t i = k; i < r; ++i) s += w(i, j) * w(i, j);
      if (s > best_norm || (s == best_norm && perm[j] < perm[best])) {
        best_norm = s;
        best = j;
      }
    }
    const double norm = std::sqrt(best_norm);
    if (!(norm > tol)) break;
    if (best != k) {
      for (std::size_t i = 0; i < r; ++i) std::swap(w(i, k), w(i, best));
      std::swap(perm[k], perm[best]);
    }
    out.pivots.push_back(perm[k]);
    out.r_diag.push_back(norm);

    // Householder reflector mapping w[k:, k] onto -sign(w_kk) |.| e_1.
    const double alpha = w(k, k) >= 0.0 ? -norm : norm;
    double vnorm2 = 0.0;
    for (std::size_t i = k; i < r; ++i) {
      v[i] = w(i, k) - (i == k ? alpha : 0.0);
      vnorm2 += v[i] * v[i];
    }
    if (vnorm2 == 0.0) continue;
    for (std::size_t j = k; j < m; ++j) {
      double dot = 0.0;
      for (std::size_t i = k; i < r; ++i) dot += v[i] * w(i, j);
      const double f = 2.0 * dot / vnorm2;
      for (std::size_t i = k; i < r; ++i) w(i, j) -= f * v[i];
    }
  }
  return out;
}

SensorLayout place_sensors(const PodBasis& basis, std::size_t n_obs) {
  const std::size_t m = basis.dim(), r = basis.rank();
  if (n_obs < 1) throw ContractError("place_sensors: need at least one sensor");
  if (n_obs > m) {
    throw ContractError("place_sensors: " + std::to_string(n_obs) + " sensors exceed state size " + std::to_string(m));
  }
  SensorLayout layout;
  layout.m = m;
  std::vector<bool> taken(m, false);
  while (layout.size() < n_obs) {
    std::vector<std::size_t> free;
    for (std::size_t j = 0; j < m; ++j)
      if (!taken[j]) free.push_back(j);
    Tensor at({r, free.size()});
    for (std::size_t k = 0; k < r; ++k)
      for (std::size_t c = 0; c < free.size(); ++c) at(k, c) = basis.psi(free[c], k);
    const auto qr = pivoted_qr(at, n_obs - layout.size());
    if (qr.pivots.empty()) {
      // Every remaining location reads zero on all modes; take them in order.
      for (std::size_t c = 0; layout.size() < n_obs; ++c) layout.indices.push_back(free[c]);
      break;
    }
    for (auto p : qr.pivots) {
      layout.indices.push_back(free[p]);
      taken[free[p]] = true;
    }
  }
  return layout;
}

SensorLayout random_layout(std::size_t m, std::size_t n, Rng& rng) {
  if (n > m) throw ContractError("random_layout: more sensors than locations");
  std::vector<std::size_t> all(m);
  for (std::size_t j = 0; j < m; ++j) all[j] = j;
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < n; ++i) std::swap(all[i], all[i + static_cast<std::size_t>(rng.below(m - i))]);
  return {m, std::vector<std::size_t>(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n))};
}

Tensor observe(const Tensor& x, const SensorLayout& layout) {
  if (x.rank() != 2 || x.cols() != layout.m) {
    throw ShapeError("observe: states " + dims_to_string(x.dims()) + " vs layout over " + std::to_string(layout.m));
  }
  layout.validate();
  Tensor y({x.rows(), layout.size()});
  for (std::size_t t = 0; t < x.rows(); ++t)
    for (std::size_t k = 0; k < layout.size(); ++k) y(t, k) = x(t, layout.indices[k]);
  return y;
}

Tensor reconstruct_series(const Tensor& y, const SensorLayout& layout, const PodBasis& basis, double max_condition) {
  const std::size_t n = layout.size(), r = basis.rank(), m = basis.dim();
  if (layout.m != m) throw ShapeError("reconstruct: layout over " + std::to_string(layout.m) + " vs basis over " +
                                      std::to_string(m));
  if (y.rank() != 2 || y.cols() != n) throw ShapeError("reconstruct: readings " + dims_to_string(y.dims()));
  layout.validate();
  Tensor hpsi({n, r});
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t c = 0; c < r; ++c) hpsi(k, c) = basis.psi(layout.indices[k], c);
  const auto s = linalg::svd(hpsi);
  const double smax = s.sigma.empty() ? 0.0 : s.sigma.front();
  const double smin = s.sigma.empty() ? 0.0 : s.sigma.back();
  const double cond = smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();
  if (!(cond <= max_condition)) {
    std::ostringstream os;
    os << "reconstruct: H psi is ill-conditioned (condition number " << cond << ")";
    throw ConditionError(os.str(), cond);
  }
  Tensor out({y.rows(), m});
  const std::size_t q = s.sigma.size();
  std::vector<double> c(q), a(r);
  for (std::size_t t = 0; t < y.rows(); ++t) {
    // a = V diag(1/sigma) U^T (y - H mean)
    for (std::size_t i = 0; i < q; ++i) {
      double d = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double mk = basis.mean.empty() ? 0.0 : basis.mean[layout.indices[k]];
        d += s.u(k, i) * (y(t, k) - mk);
      }
      c[i] = d / s.sigma[i];
    }
    for (std::size_t j = 0; j < r; ++j) {
      double d = 0.0;
      for (std::size_t i = 0; i < q; ++i) d += s.v(j, i) * c[i];
      a[j] = d;
    }
    auto dst = out.row(t);
    for (std::size_t j = 0; j < m; ++j) {
      double v = basis.mean.empty() ? 0.0 : basis.mean[j];
      for (std::size_t k = 0; k < r; ++k) v += basis.psi(j, k) * a[k];
      dst[j] = v;
    }
  }
  return out;
}

std::vector<double> reconstruct(std::span<const double> y, const SensorLayout& layout, const PodBasis& basis,
                                double max_condition) {
  Tensor yt({1, y.size()}, std::vector<double>(y.begin(), y.end()));
  return reconstruct_series(yt, layout, basis, max_condition).vector();
}

void save_layout(const std::filesystem::path& path, const SensorLayout& layout) {
  nlohmann::json j{{"m", layout.m}, {"indices", layout.indices}};
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

SensorLayout load_layout(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  SensorLayout layout;
  try {
    const auto j = nlohmann::json::parse(is);
    layout.m = j.at("m").get<std::size_t>();
    layout.indices = j.at("indices").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  try {
    layout.validate();
  } catch (const ContractError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return layout;
}

void save_basis(const std::filesystem::path& path, const PodBasis& basis) {
  save_rmx(path, basis.psi);
  auto side = path;
  side.replace_extension(".json");
  std::ofstream os(side);
  if (!os) throw IoError("cannot write " + side.string());
  os << nlohmann::json{{"sigma", basis.sigma}, {"mean", basis.mean}}.dump() << '\n';
}

PodBasis load_basis(const std::filesystem::path& path) {
  PodBasis b;
  b.psi = load_rmx(path);
  auto side = path;
  side.replace_extension(".json");
  std::ifstream is(side);
  if (!is) throw IoError("cannot open " + side.string());
  try {
    const auto j = nlohmann::json::parse(is);
    b.sigma = j.at("sigma").get<std::vector<double>>();
    b.mean = j.at("mean").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(side.string() + ": " + e.what());
  }
  if (b.psi.rank() != 2 || b.psi.cols() != b.sigma.size() || (!b.mean.empty() && b.mean.size() != b.psi.rows())) {
    throw IoError(path.string() + ": basis and sidecar disagree");
  }
  return b;
}

}  // namespace wakerom::sensing
