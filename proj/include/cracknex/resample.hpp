#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "cracknex/tensor.hpp"

namespace cracknex {

struct LinearTaps {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

/// Half-pixel-centre sampling positions for linear interpolation from `in`
/// samples to `out` samples, clamped at the borders.
inline LinearTaps linear_taps(int in, int out) {
  LinearTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(src));
    t.lo[o] = lo;
    t.hi[o] = std::min(lo + 1, in - 1);
    t.frac[o] = src - lo;
  }
  return t;
}

/// Nearest source index for output cell `o` (half-pixel centres).
inline int nearest_index(int o, int in, int out) {
  const int i = static_cast<int>(std::floor((o + 0.5) * static_cast<double>(in) / out));
  return std::clamp(i, 0, in - 1);
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& src, int out_h, int out_w) {
  const auto ty = linear_taps(src.height(), out_h);
  const auto tx = linear_taps(src.width(), out_w);
  Tensor<T> out(src.channels(), out_h, out_w);
  for (int c = 0; c < src.channels(); ++c)
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x) {
        const double fy = ty.frac[y], fx = tx.frac[x];
        const double a = src(c, ty.lo[y], tx.lo[x]), b = src(c, ty.lo[y], tx.hi[x]);
        const double d = src(c, ty.hi[y], tx.lo[x]), e = src(c, ty.hi[y], tx.hi[x]);
        const double top = a + (b - a) * fx;
        const double bot = d + (e - d) * fx;
        out(c, y, x) = static_cast<T>(top + (bot - top) * fy);
      }
  return out;
}

template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& src, int out_h, int out_w) {
  Tensor<T> out(src.channels(), out_h, out_w);
  for (int c = 0; c < src.channels(); ++c)
    for (int y = 0; y < out_h; ++y) {
      const int sy = nearest_index(y, src.height(), out_h);
      for (int x = 0; x < out_w; ++x)
        out(c, y, x) = src(c, sy, nearest_index(x, src.width(), out_w));
    }
  return out;
}

/// Nearest-neighbour downsampling of a binary mask to a feature grid, as
/// real-valued 0/1 weights.
template <typename T>
Tensor<T> mask_to_grid(const Mask& mask, int grid_h, int grid_w) {
  Tensor<T> out(1, grid_h, grid_w);
  for (int y = 0; y < grid_h; ++y) {
    const int sy = nearest_index(y, mask.height(), grid_h);
    for (int x = 0; x < grid_w; ++x)
      out(0, y, x) = mask(0, sy, nearest_index(x, mask.width(), grid_w)) ? T(1) : T(0);
  }
  return out;
}

}  // namespace cracknex
