/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#include "svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace wakerom::svg {

namespace {

constexpr double kWidth = 720.0, kHeight = 420.0;
constexpr double kLeft = 70.0, kRight = 150.0, kTop = 40.0, kBottom = 50.0;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string num(double v) { return fmt("%.2f", v); }

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string header(double w, double h, const std::string& title) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) + "\" height=\"" + num(h) +
         "\" viewBox=\"0 0 " + num(w) + " " + num(h) + "\" font-family=\"sans-serif\" font-size=\"12\">\n" +
         "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<text x=\"" + num(w / 2) +
         "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" + escape(title) + "</text>\n";
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void finish() {
    if (!(lo <= hi)) lo = 0.0, hi = 1.0;
    if (hi - lo < 1e-12 * std::max(1.0, std::abs(hi))) {
      lo -= 0.5;
      hi += 0.5;
    }
  }
};

std::string axes(const Range& xr, const Range& yr, const std::string& xl, const std::string& yl, bool x_ticks) {
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  std::string s = "<g stroke=\"black\" fill=\"none\"><line x1=\"" + num(x0) + "\" y1=\"" + num(y0) + "\" x2=\"" +
                  num(x1) + "\" y2=\"" + num(y0) + "\"/><line x1=\"" + num(x0) + "\" y1=\"" + num(y0) + "\" x2=\"" +
                  num(x0) + "\" y2=\"" + num(y1) + "\"/></g>\n";
  for (int k = 0; k <= 4; ++k) {
    const double f = k / 4.0;
    const double yv = yr.lo + f * (yr.hi - yr.lo), yp = y0 - f * (y0 - y1);
    s += "<text x=\"" + num(x0 - 6) + "\" y=\"" + num(yp + 4) + "\" text-anchor=\"end\">" + fmt("%.4g", yv) +
         "</text>\n";
    if (x_ticks) {
      const double xv = xr.lo + f * (xr.hi - xr.lo), xp = x0 + f * (x1 - x0);
      s += "<text x=\"" + num(xp) + "\" y=\"" + num(y0 + 18) + "\" text-anchor=\"middle\">" + fmt("%.4g", xv) +
           "</text>\n";
    }
  }
  s += "<text x=\"" + num((x0 + x1) / 2) + "\" y=\"" + num(kHeight - 10) + "\" text-anchor=\"middle\">" +
       escape(xl) + "</text>\n";
  s += "<text x=\"16\" y=\"" + num((y0 + y1) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
       num((y0 + y1) / 2) + ")\">" + escape(yl) + "</text>\n";
  return s;
}

std::string legend(const std::vector<std::pair<std::string, std::string>>& items) {
  std::string s;
  double y = kTop + 10;
  for (const auto& [name, color] : items) {
    s += "<rect x=\"" + num(kWidth - kRight + 15) + "\" y=\"" + num(y - 9) + "\" width=\"12\" height=\"12\" fill=\"" +
         color + "\"/><text x=\"" + num(kWidth - kRight + 32) + "\" y=\"" + num(y + 1) + "\">" + escape(name) +
         "</text>\n";
    y += 18;
  }
  return s;
}

}  // namespace

std::string line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                       const std::vector<Series>& series) {
  Range xr, yr;
  for (const auto& s : series) {
    for (double v : s.x) xr.add(v);
    for (double v : s.y) yr.add(v);
  }
  xr.finish();
  yr.finish();
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  std::string out = header(kWidth, kHeight, title) + axes(xr, yr, x_label, y_label, true);
  std::vector<std::pair<std::string, std::string>> items;
  for (const auto& s : series) {
    out += "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" + s.color + "\" points=\"";
    const std::size_t n = std::min(s.x.size(), s.y.size());
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      const double px = x0 + (s.x[i] - xr.lo) / (xr.hi - xr.lo) * (x1 - x0);
      const double py = y0 - (s.y[i] - yr.lo) / (yr.hi - yr.lo) * (y0 - y1);
      out += num(px) + "," + num(py) + (i + 1 < n ? " " : "");
    }
    out += "\"/>\n";
    items.emplace_back(s.name, s.color);
  }
  return out + legend(items) + "</svg>\n";
}

std::string bar_chart(const std::string& title, const std::vector<std::string>& categories,
                      const std::vector<BarGroup>& groups) {
  Range yr;
  yr.add(0.0);
  for (const auto& g : groups)
    for (double v : g.values) yr.add(v);
  yr.finish();
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  std::string out = header(kWidth, kHeight, title) + axes(Range{0, 1}, yr, "", "", false);
  const double slot = (x1 - x0) / double(std::max<std::size_t>(categories.size(), 1));
  const double bar = 0.8 * slot / double(std::max<std::size_t>(groups.size(), 1));
  std::vector<std::pair<std::string, std::string>> items;
  for (std::size_t c = 0; c < categories.size(); ++c) {
    out += "<text x=\"" + num(x0 + (double(c) + 0.5) * slot) + "\" y=\"" + num(y0 + 18) +
           "\" text-anchor=\"middle\">" + escape(categories[c]) + "</text>\n";
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (std::size_t c = 0; c < categories.size() && c < groups[g].values.size(); ++c) {
      const double v = std::isfinite(groups[g].values[c]) ? groups[g].values[c] : 0.0;
      const double top = y0 - (v - yr.lo) / (yr.hi - yr.lo) * (y0 - y1);
      const double base = y0 - (0.0 - yr.lo) / (yr.hi - yr.lo) * (y0 - y1);
      const double left = x0 + double(c) * slot + 0.1 * slot + double(g) * bar;
      out += "<rect x=\"" + num(left) + "\" y=\"" + num(std::min(top, base)) + "\" width=\"" + num(bar) +
             "\" height=\"" + num(std::abs(base - top)) + "\" fill=\"" + groups[g].color + "\"/>\n";
    }
    items.emplace_back(groups[g].name, groups[g].color);
  }
  return out + legend(items) + "</svg>\n";
}

std::string grid_overlay(const std::string& title, std::size_t nx, std::size_t ny, const std::vector<double>& field,
                         const std::vector<Marker>& markers) {
  const double cell = std::min(560.0 / double(std::max<std::size_t>(nx, 1)), 400.0 / double(std::max<std::size_t>(ny, 1)));
  const double w = 2 * 40 + cell * double(nx) + 110, h = 60 + cell * double(ny) + 30;
  Range r;
  for (double v : field) r.add(v);
  r.finish();
  std::string out = header(w, h, title);
  for (std::size_t iy = 0; iy < ny; ++iy) {
    for (std::size_t ix = 0; ix < nx; ++ix) {
      const std::size_t k = iy * nx + ix;
      const double f = k < field.size() && std::isfinite(field[k]) ? (field[k] - r.lo) / (r.hi - r.lo) : 0.0;
      const int shade = 255 - int(std::lround(200.0 * f));
      char color[64];
      std::snprintf(color, sizeof color, "rgb(%d,%d,255)", shade, shade);
      out += "<rect x=\"" + num(40 + cell * double(ix)) + "\" y=\"" + num(40 + cell * double(ny - 1 - iy)) +
             "\" width=\"" + num(cell) + "\" height=\"" + num(cell) + "\" fill=\"" + color + "\"/>\n";
    }
  }
  for (const auto& m : markers) {
    out += "<circle cx=\"" + num(40 + cell * (double(m.ix) + 0.5)) + "\" cy=\"" +
           num(40 + cell * (double(ny - 1 - m.iy) + 0.5)) + "\" r=\"" + num(0.4 * cell) + "\" fill=\"" + m.color +
           "\" stroke=\"black\"/>\n";
  }
  return out + "</svg>\n";
}

}  // namespace wakerom::svg
