#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cracknex/tensor.hpp"

namespace cracknex {

/// Floor applied to the illumination estimate.
inline constexpr double kIlluminationFloor = 1e-4;

struct Decomposition {
  Image reflectance;             // (3, H, W) in [0,1]
  Tensor<double> illumination;   // (1, H, W) in [kIlluminationFloor, 1]
};

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double total = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    total += k[i + radius];
  }
  for (auto& v : k) v /= total;
  return k;
}

inline int reflect_index(int i, int n) {
  const int period = 2 * n;
  int m = ((i % period) + period) % period;
  return m < n ? m : period - 1 - m;
}

}  // namespace detail

/// Separable Gaussian blur of a single plane with symmetric borders.
inline Tensor<double> gaussian_blur(const Tensor<double>& plane, double sigma) {
  require(plane.channels() == 1, "gaussian_blur: expected a single plane");
  require(sigma > 0, "gaussian_blur: sigma must be > 0");
  const auto k = detail::gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  const int h = plane.height(), w = plane.width();
  Tensor<double> tmp(1, h, w), out(1, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * plane(0, y, detail::reflect_index(x + i, w));
      tmp(0, y, x) = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * tmp(0, detail::reflect_index(y + i, h), x);
      out(0, y, x) = s;
    }
  return out;
}

/// Illumination-scale default: min(H, W) / 16.
inline double default_smoothing_sigma(int height, int width) {
  return std::min(height, width) / 16.0;
}

/// Single-scale Retinex split: the illumination is the blurred per-pixel
/// channel maximum, clamped to [floor, 1]; reflectance is image / illumination
/// capped at 1. R * L == min(I, L) holds pixelwise.
inline Decomposition decompose(const Image& image, double smoothing_sigma) {
  require(image.channels() == 3, "decompose: expected an RGB image");
  require(smoothing_sigma > 0, "decompose: smoothing_sigma must be > 0");
  const int h = image.height(), w = image.width();
  Tensor<double> brightest(1, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      brightest(0, y, x) = std::max({image(0, y, x), image(1, y, x), image(2, y, x)});

  Decomposition d;
  d.illumination = gaussian_blur(brightest, smoothing_sigma);
  for (auto& v : d.illumination) v = std::clamp(v, kIlluminationFloor, 1.0);
  d.reflectance = Image(3, h, w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        d.reflectance(c, y, x) = std::min(image(c, y, x) / d.illumination(0, y, x), 1.0);
  return d;
}

inline std::vector<Decomposition> decompose_batch(const std::vector<Image>& images,
                                                  double smoothing_sigma) {
  std::vector<Decomposition> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    try {
      out.push_back(decompose(images[i], smoothing_sigma));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("decompose_batch[" + std::to_string(i) + "]: " + e.what());
    }
  }
  return out;
}

}  // namespace cracknex
