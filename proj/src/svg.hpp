/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#pragma once

// Plain-text SVG charts. Coordinates are printed with fixed precision so the
// output is byte-stable.

#include <cstddef>
#include <string>
#include <vector>

namespace wakerom::svg {

struct Series {
  std::string name;
  std::string color;
  std::vector<double> x;
  std::vector<double> y;
};

std::string line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                       const std::vector<Series>& series);

struct BarGroup {
  std::string name;
  std::string color;
  std::vector<double> values;  ///< one per category
};

std::string bar_chart(const std::string& title, const std::vector<std::string>& categories,
                      const std::vector<BarGroup>& groups);

struct Marker {
  std::size_t ix = 0;
  std::size_t iy = 0;
  std::string color;
};

/// Heat map of a field on an nx * ny grid (flat index iy * nx + ix, row iy
/// drawn bottom-up) with circular markers on top.
std::string grid_overlay(const std::string& title, std::size_t nx, std::size_t ny, const std::vector<double>& field,
                         const std::vector<Marker>& markers);

}  // namespace wakerom::svg
