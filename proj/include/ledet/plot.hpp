#pragma once

// Minimal deterministic plotting: series rasterized to PNG (axes, polylines,
// square markers) with the plotted values written alongside as CSV.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ledet/image.hpp"

namespace ledet {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
  bool connect = true;  // false renders a scatter
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  int width = 480;
  int height = 360;
};

inline std::string plot_csv(const std::vector<Series>& series) {
  std::ostringstream os;
  os << "series,x,y\n" << std::setprecision(10);
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) os << s.name << ',' << s.x[i] << ',' << s.y[i] << '\n';
  }
  return os.str();
}

namespace detail {

inline const std::array<std::array<float, 3>, 6>& palette() {
  static const std::array<std::array<float, 3>, 6> p = {{{0.12f, 0.47f, 0.71f},
                                                          {0.85f, 0.37f, 0.01f},
                                                          {0.17f, 0.63f, 0.17f},
                                                          {0.84f, 0.15f, 0.16f},
                                                          {0.58f, 0.40f, 0.74f},
                                                          {0.55f, 0.34f, 0.29f}}};
  return p;
}

inline void put(Image& im, int x, int y, const std::array<float, 3>& c) {
  if (x < 0 || y < 0 || x >= im.width || y >= im.height) return;
  for (int k = 0; k < 3; ++k) im.at(k, y, x) = c[k];
}

inline void line(Image& im, int x0, int y0, int x1, int y1, const std::array<float, 3>& c) {
  const int dx = std::abs(x1 - x0);
  const int dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1;
  const int sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    put(im, x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

}  // namespace detail

/// Rasterizes the series; errors on empty input or mismatched x/y lengths.
inline Image render_plot(const std::vector<Series>& series, const PlotSpec& spec) {
  std::size_t points = 0;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("plot: series '" + s.name + "' has mismatched x/y");
    points += s.x.size();
  }
  if (points == 0) throw std::invalid_argument("plot: nothing to plot");
  double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  if (!std::isfinite(xmin + xmax + ymin + ymax)) throw std::invalid_argument("plot: non-finite value");
  if (xmax == xmin) {
    xmin -= 0.5;
    xmax += 0.5;
  }
  if (ymax == ymin) {
    ymin -= 0.5;
    ymax += 0.5;
  }
  Image im;
  im.channels = 3;
  im.width = spec.width;
  im.height = spec.height;
  im.data.assign(static_cast<std::size_t>(3) * spec.width * spec.height, 1.0f);
  const int left = 40, right = spec.width - 16, top = 16, bottom = spec.height - 32;
  const std::array<float, 3> axis{0.2f, 0.2f, 0.2f};
  detail::line(im, left, bottom, right, bottom, axis);
  detail::line(im, left, bottom, left, top, axis);
  for (int t = 0; t <= 4; ++t) {
    const int x = left + (right - left) * t / 4;
    const int y = bottom - (bottom - top) * t / 4;
    detail::line(im, x, bottom, x, bottom + 4, axis);
    detail::line(im, left - 4, y, left, y, axis);
  }
  auto px = [&](double x) { return left + static_cast<int>(std::lround((x - xmin) / (xmax - xmin) * (right - left - 8))) + 4; };
  auto py = [&](double y) { return bottom - static_cast<int>(std::lround((y - ymin) / (ymax - ymin) * (bottom - top - 8))) - 4; };
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const auto& c = detail::palette()[si % detail::palette().size()];
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      const int x = px(s.x[i]);
      const int y = py(s.y[i]);
      if (s.connect && i > 0) detail::line(im, px(s.x[i - 1]), py(s.y[i - 1]), x, y, c);
      for (int dy = -2; dy <= 2; ++dy) {
        for (int dx = -2; dx <= 2; ++dx) detail::put(im, x + dx, y + dy, c);
      }
    }
  }
  return im;
}

/// Writes `<stem>.png` and `<stem>.csv`.
inline void emit_plot(const std::string& stem, const std::vector<Series>& series, const PlotSpec& spec) {
  const Image im = render_plot(series, spec);
  write_png(stem + ".png", im);
  std::ofstream f(stem + ".csv", std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + stem + ".csv");
  f << plot_csv(series);
}

/// Average ranks (ties share the mean rank).
inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
    i = j + 1;
  }
  return r;
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman: need two equal-length samples");
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace ledet
