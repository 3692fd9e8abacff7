/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#pragma once

#include <optional>
#include <vector>

#include "wakerom/tensor.hpp"

namespace wakerom::linalg {

/// Dense products on rank-2 tensors.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Lower Cholesky factor of a symmetric matrix, or nullopt if a pivot is not
/// strictly positive.
std::optional<Tensor> cholesky(const Tensor& a);

/// Solves L L^T X = B for X given the lower factor L. B is [n, k].
Tensor cholesky_solve(const Tensor& lower, const Tensor& b);

/// log det of an SPD matrix through its Cholesky factor.
double logdet_spd(const Tensor& lower);

/// Eigenvalues of a symmetric matrix in ascending order.
std::vector<double> symmetric_eigenvalues(const Tensor& a);

struct Svd {
  Tensor u;                    ///< [rows, k]
  std::vector<double> sigma;   ///< k values, descending
  Tensor v;                    ///< [cols, k]
};

/// Thin SVD, k = min(rows, cols).
Svd svd(const Tensor& a);

/// Minimum-norm least-squares solution of A x = b together with the 2-norm
/// condition number of A (infinite if A has a zero singular value).
struct LeastSquares {
  std::vector<double> x;
  double condition;
};
LeastSquares least_squares(const Tensor& a, std::span<const double> b);

}  // namespace wakerom::linalg
