#pragma once

#include <algorithm>
#include <cmath>

#include "qmri/image.hpp"

namespace oracle {

using qmri::Image;
using qmri::Mask;

// Naive references: plain loops over (row, col), doubles throughout.

inline double naive_mae(const Image& x, const Image& y, const Mask& m) {
  double s = 0;
  int n = 0;
  for (std::size_t r = 0; r < x.height; ++r)
    for (std::size_t c = 0; c < x.width; ++c)
      if (m(r, c)) {
        s += std::fabs(double(x(r, c)) - double(y(r, c)));
        ++n;
      }
  return s / n;
}

inline double naive_mpe(const Image& x, const Image& y, const Mask& m, double eps) {
  double s = 0;
  int n = 0;
  for (std::size_t r = 0; r < x.height; ++r)
    for (std::size_t c = 0; c < x.width; ++c)
      if (m(r, c) && std::fabs(double(y(r, c))) > eps) {
        s += std::fabs((double(x(r, c)) - double(y(r, c))) / double(y(r, c)));
        ++n;
      }
  return s / n;
}

inline double naive_psnr(const Image& x, const Image& y, const Mask& m) {
  double se = 0, peak = -1e300;
  int n = 0;
  for (std::size_t r = 0; r < x.height; ++r)
    for (std::size_t c = 0; c < x.width; ++c)
      if (m(r, c)) {
        const double d = double(x(r, c)) - double(y(r, c));
        se += d * d;
        peak = std::max(peak, double(y(r, c)));
        ++n;
      }
  return 10.0 * std::log10(peak * peak / (se / n));
}

inline double naive_ssim(const Image& x, const Image& y, const Mask& m, int win, double range) {
  const double c1 = std::pow(0.01 * range, 2), c2 = std::pow(0.03 * range, 2);
  const int h = int(x.height), w = int(x.width), r = win / 2;
  double total = 0;
  int count = 0;
  for (int i = r; i < h - r; ++i) {
    for (int j = r; j < w - r; ++j) {
      bool inside = true;
      for (int a = -r; a <= r; ++a)
        for (int b = -r; b <= r; ++b)
          if (!m(i + a, j + b)) inside = false;
      if (!inside) continue;
      double mx = 0, my = 0;
      for (int a = -r; a <= r; ++a)
        for (int b = -r; b <= r; ++b) {
          mx += x(i + a, j + b);
          my += y(i + a, j + b);
        }
      const double n = double(win * win);
      mx /= n;
      my /= n;
      double vx = 0, vy = 0, cxy = 0;
      for (int a = -r; a <= r; ++a)
        for (int b = -r; b <= r; ++b) {
          const double dx = x(i + a, j + b) - mx, dy = y(i + a, j + b) - my;
          vx += dx * dx;
          vy += dy * dy;
          cxy += dx * dy;
        }
      vx /= n;
      vy /= n;
      cxy /= n;
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return total / count;
}

inline double masked_range(const Image& y, const Mask& m) {
  double lo = 1e300, hi = -1e300;
  for (std::size_t i = 0; i < y.size(); ++i)
    if (m.data[i]) {
      lo = std::min(lo, double(y.data[i]));
      hi = std::max(hi, double(y.data[i]));
    }
  return hi - lo;
}

inline Mask disc_mask(std::size_t h, std::size_t w, double radius) {
  Mask m(h, w, 0);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double dy = r - (h - 1) / 2.0, dx = c - (w - 1) / 2.0;
      m(r, c) = dy * dy + dx * dx <= radius * radius;
    }
  return m;
}

// per-voxel normalized squared error in percent, 0 outside the mask
inline double naive_nse(const Image& x, const Image& y, const Mask& m, std::size_t r, std::size_t c) {
  if (!m(r, c)) return 0.0;
  const double d = double(x(r, c)) - double(y(r, c));
  return d * d / std::fabs(double(y(r, c))) * 100.0;
}

}  // namespace oracle
