/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace wakerom {

using Dims = std::vector<std::size_t>;

std::string dims_to_string(const Dims& dims);

/// Dense row-major array of doubles.
///
/// The last dimension is contiguous. For rank-2 tensors `rows()` and `cols()`
/// give the two extents; higher ranks flatten the leading dimensions into rows.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Dims dims);
  Tensor(Dims dims, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor filled(Dims dims, double value);
  static Tensor identity(std::size_t n);

  const Dims& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Product of all but the last dimension.
  std::size_t rows() const;
  /// Last dimension (1 for scalars).
  std::size_t cols() const;

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& vector() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

  std::span<const double> row(std::size_t r) const;
  std::span<double> row(std::size_t r);

  /// Same data, new dims with the same element count.
  Tensor reshaped(Dims dims) const;

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Dims dims_;
  std::vector<double> data_;
};

/// Writes the RMX1 layout: magic "RMX1", u32 rank, rank x u64 dims, then the
/// row-major payload as little-endian IEEE-754 doubles.
void write_rmx(std::ostream& os, const Tensor& t);
Tensor read_rmx(std::istream& is);

void save_rmx(const std::filesystem::path& path, const Tensor& t);
Tensor load_rmx(const std::filesystem::path& path);

/// Rows [begin, end) of a rank-2 tensor.
Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end);
/// Rows selected by index, in the order given.
Tensor take_rows(const Tensor& t, std::span<const std::size_t> idx);

}  // namespace wakerom
