/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace wakerom {

/// PCG32 (XSH-RR, 64-bit state, 32-bit output) with a fixed stream constant.
///
/// Update rule: state <- state * 6364136223846793005 + inc, with inc odd.
/// Output: rotr32(((state >> 18) ^ state) >> 27, state >> 59) of the old state.
/// Uniform doubles use 53 bits from two outputs; normals use Box-Muller with
/// the second variate cached. Nothing here depends on the standard library's
/// distributions, so streams are identical on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }

  std::uint32_t next_u32();
  /// Uniform on [0, 1).
  double uniform();
  /// Uniform on [lo, hi).
  double uniform(double lo, double hi);
  /// Standard normal.
  double normal();
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  void fill_normal(std::span<double> out);

  /// Fisher-Yates shuffle driven by this stream.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      auto j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Independent generator for member `i`, seeded with seed XOR i.
  Rng split(std::uint64_t i) const { return Rng(seed_ ^ i); }

 private:
  std::uint64_t seed_;
  std::uint64_t state_ = 0;
  std::uint64_t inc_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace wakerom
