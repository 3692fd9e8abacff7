/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#include "wakerom/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

#include "wakerom/error.hpp"

namespace wakerom {

namespace {

std::size_t product(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

template <typename T>
void put(std::ostream& os, T v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("RMX1: truncated stream");
  return to_little(v);
}

constexpr char kMagic[4] = {'R', 'M', 'X', '1'};
constexpr std::uint32_t kMaxRank = 16;

}  // namespace

std::string dims_to_string(const Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Dims dims) : dims_(std::move(dims)), data_(product(dims_), 0.0) {}

Tensor::Tensor(Dims dims, std::vector<double> data) : dims_(std::move(dims)), data_(std::move(data)) {
  if (product(dims_) != data_.size()) {
    throw ShapeError("tensor dims " + dims_to_string(dims_) + " do not match " +
                     std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::filled(Dims dims, double value) {
  Tensor t(std::move(dims));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  if (dims_.empty()) return 1;
  return product(Dims(dims_.begin(), dims_.end() - 1));
}

std::size_t Tensor::cols() const { return dims_.empty() ? 1 : dims_.back(); }

std::span<const double> Tensor::row(std::size_t r) const {
  return std::span<const double>(data_).subspan(r * cols(), cols());
}

std::span<double> Tensor::row(std::size_t r) { return std::span<double>(data_).subspan(r * cols(), cols()); }

Tensor Tensor::reshaped(Dims dims) const {
  if (product(dims) != data_.size()) {
    throw ShapeError("cannot reshape " + dims_to_string(dims_) + " to " + dims_to_string(dims));
  }
  return Tensor(std::move(dims), data_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void write_rmx(std::ostream& os, const Tensor& t) {
  os.write(kMagic, 4);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.dims()) put<std::uint64_t>(os, d);
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  } else {
    for (double v : t.data()) put<double>(os, v);
  }
  if (!os) throw IoError("RMX1: write failed");
}

Tensor read_rmx(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError("RMX1: bad magic");
  auto rank = get<std::uint32_t>(is);
  if (rank > kMaxRank) throw IoError("RMX1: rank " + std::to_string(rank) + " too large");
  Dims dims(rank);
  for (auto& d : dims) d = static_cast<std::size_t>(get<std::uint64_t>(is));
  std::vector<double> data(product(dims));
  is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!is) throw IoError("RMX1: truncated payload");
  if constexpr (std::endian::native != std::endian::little) {
    for (auto& v : data) v = to_little(v);
  }
  return Tensor(std::move(dims), std::move(data));
}

void save_rmx(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  try {
    write_rmx(os, t);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

Tensor load_rmx(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return read_rmx(is);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  if (t.rank() != 2 || begin > end || end > t.rows()) {
    throw ShapeError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                     dims_to_string(t.dims()));
  }
  const auto c = t.cols();
  std::vector<double> out(t.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                          t.data().begin() + static_cast<std::ptrdiff_t>(end * c));
  return Tensor({end - begin, c}, std::move(out));
}

Tensor take_rows(const Tensor& t, std::span<const std::size_t> idx) {
  if (t.rank() != 2) throw ShapeError("take_rows expects rank 2, got " + dims_to_string(t.dims()));
  Tensor out({idx.size(), t.cols()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= t.rows()) throw ShapeError("take_rows index " + std::to_string(idx[i]) + " out of range");
    std::copy(t.row(idx[i]).begin(), t.row(idx[i]).end(), out.row(i).begin());
  }
  return out;
}

}  // namespace wakerom
