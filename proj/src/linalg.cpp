/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#include "wakerom/linalg.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "wakerom/error.hpp"

namespace wakerom::linalg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMat> view(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("linalg: expected a matrix, got " + dims_to_string(t.dims()));
  return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

Tensor from_eigen(const RowMat& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  Eigen::Map<RowMat>(t.data().data(), m.rows(), m.cols()) = m;
  return t;
}

void require_square(const Tensor& a, const char* what) {
  if (a.rank() != 2 || a.rows() != a.cols()) {
    throw ShapeError(std::string(what) + ": expected a square matrix, got " + dims_to_string(a.dims()));
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul: incompatible operands " + dims_to_string(a.dims()) + " and " + dims_to_string(b.dims()));
  }
  return from_eigen(view(a) * view(b));
}

Tensor transpose(const Tensor& a) { return from_eigen(view(a).transpose()); }

std::optional<Tensor> cholesky(const Tensor& a) {
  require_square(a, "cholesky");
  const std::size_t n = a.rows();
  Tensor l({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) return std::nullopt;
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

Tensor cholesky_solve(const Tensor& lower, const Tensor& b) {
  require_square(lower, "cholesky_solve");
  const std::size_t n = lower.rows();
  if (b.rank() != 2 || b.rows() != n) {
    throw ShapeError("cholesky_solve: right-hand side " + dims_to_string(b.dims()) + " does not match factor " +
                     dims_to_string(lower.dims()));
  }
  Tensor x = b;
  const std::size_t k = b.cols();
  // Forward substitution L y = b, then back substitution L^T x = y.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      double s = x(i, c);
      for (std::size_t j = 0; j < i; ++j) s -= lower(i, j) * x(j, c);
      x(i, c) = s / lower(i, i);
    }
  }
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t c = 0; c < k; ++c) {
      double s = x(i, c);
      for (std::size_t j = i + 1; j < n; ++j) s -= lower(j, i) * x(j, c);
      x(i, c) = s / lower(i, i);
    }
  }
  return x;
}

double logdet_spd(const Tensor& lower) {
  require_square(lower, "logdet_spd");
  double s = 0.0;
  for (std::size_t i = 0; i < lower.rows(); ++i) s += std::log(lower(i, i));
  return 2.0 * s;
}

std::vector<double> symmetric_eigenvalues(const Tensor& a) {
  require_square(a, "symmetric_eigenvalues");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(view(a), Eigen::EigenvaluesOnly);
  const auto& ev = es.eigenvalues();
  return std::vector<double>(ev.data(), ev.data() + ev.size());
}

Svd svd(const Tensor& a) {
  Eigen::BDCSVD<Eigen::MatrixXd> solver(Eigen::MatrixXd(view(a)), Eigen::ComputeThinU | Eigen::ComputeThinV);
  Svd out;
  out.u = from_eigen(solver.matrixU());
  out.v = from_eigen(solver.matrixV());
  const auto& s = solver.singularValues();
  out.sigma.assign(s.data(), s.data() + s.size());
  return out;
}

LeastSquares least_squares(const Tensor& a, std::span<const double> b) {
  if (a.rank() != 2 || b.size() != a.rows()) {
    throw ShapeError("least_squares: matrix " + dims_to_string(a.dims()) + " and rhs of length " +
                     std::to_string(b.size()));
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> solver(Eigen::MatrixXd(view(a)), Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& s = solver.singularValues();
  LeastSquares out;
  const double smax = s.size() ? s(0) : 0.0;
  const double smin = s.size() ? s(s.size() - 1) : 0.0;
  out.condition = smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();
  Eigen::VectorXd rhs = Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
  Eigen::VectorXd x = solver.solve(rhs);
  out.x.assign(x.data(), x.data() + x.size());
  return out;
}

}  // namespace wakerom::linalg
