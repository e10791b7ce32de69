#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "cracknex/image_io.hpp"
#include "cracknex/random.hpp"
#include "cracknex/resample.hpp"
#include "cracknex/tensor.hpp"

namespace cracknex {

struct ImageSample {
  std::string id;
  Image image;  // (3, H, W) in [0,1]
  Mask mask;    // (1, H, W) in {0,1}

  int height() const { return image.height(); }
  int width() const { return image.width(); }

  void validate() const {
    require(image.channels() == 3, "sample '" + id + "': image must have 3 channels");
    require(mask.channels() == 1 && mask.height() == image.height() &&
                mask.width() == image.width(),
            "sample '" + id + "': mask and image sizes differ");
    for (auto m : mask) require(m == 0 || m == 1, "sample '" + id + "': mask is not binary");
  }

  bool operator==(const ImageSample&) const = default;
};

enum class SplitTag { Base, Novel };

struct Dataset {
  std::vector<ImageSample> samples;
  SplitTag split = SplitTag::Base;

  std::size_t size() const { return samples.size(); }

  void validate() const {
    require(!samples.empty(), "dataset is empty");
    std::set<std::string> ids;
    for (const auto& s : samples) {
      require(ids.insert(s.id).second, "duplicate sample id '" + s.id + "'");
      s.validate();
    }
  }
};

struct Episode {
  std::vector<ImageSample> support;
  ImageSample query;

  int shot_count() const { return static_cast<int>(support.size()); }
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Loads `<root>/images/<stem>.png` paired with `<root>/masks/<stem>.png`.
/// Images are resized bilinearly and masks by nearest neighbour followed by a
/// 0.5 threshold. Samples come back sorted by stem.
inline Dataset load_dataset(const std::filesystem::path& root, int target_h, int target_w,
                            SplitTag split = SplitTag::Base) {
  namespace fs = std::filesystem;
  require(target_h > 0 && target_w > 0 && target_h % 8 == 0 && target_w % 8 == 0,
          "load_dataset: target size must be positive multiples of 8");
  const fs::path images = root / "images";
  const fs::path masks = root / "masks";
  if (!fs::is_directory(images) || !fs::is_directory(masks)) {
    throw DatasetError("dataset root '" + root.string() +
                       "' must contain images/ and masks/ directories");
  }
  std::vector<std::string> stems;
  for (const auto& entry : fs::directory_iterator(images)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png")
      stems.push_back(entry.path().stem().string());
  }
  if (stems.empty()) throw DatasetError("no PNG images under '" + images.string() + "'");
  std::sort(stems.begin(), stems.end());

  Dataset ds;
  ds.split = split;
  for (const auto& stem : stems) {
    const fs::path mask_path = masks / (stem + ".png");
    if (!fs::is_regular_file(mask_path)) {
      throw DatasetError("missing mask for image '" + stem + "'");
    }
    ImageSample s;
    s.id = stem;
    s.image = resize_bilinear(read_image_png(images / (stem + ".png")), target_h, target_w);
    const auto gray = resize_nearest(read_gray_png(mask_path), target_h, target_w);
    s.mask = Mask(1, target_h, target_w);
    for (std::size_t i = 0; i < gray.size(); ++i) s.mask[i] = gray[i] >= 0.5 ? 1 : 0;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  for (const auto& s : ds.samples) {
    write_image_png(root / "images" / (s.id + ".png"), s.image);
    write_mask_png(root / "masks" / (s.id + ".png"), s.mask);
  }
}

/// Draws K+1 distinct samples uniformly without replacement; the first K are
/// the support set and the last is the query.
inline Episode sample_episode(const Dataset& dataset, int shots, std::uint64_t seed) {
  require(shots >= 1, "sample_episode: K must be >= 1");
  if (dataset.size() < static_cast<std::size_t>(shots) + 1) {
    throw DatasetError("sample_episode: dataset has " + std::to_string(dataset.size()) +
                       " samples, need at least " + std::to_string(shots + 1));
  }
  auto rng = make_rng(seed);
  std::vector<std::size_t> idx(dataset.size());
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates.
  for (int i = 0; i <= shots; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  Episode ep;
  for (int i = 0; i < shots; ++i) ep.support.push_back(dataset.samples[idx[i]]);
  ep.query = dataset.samples[idx[shots]];
  return ep;
}

struct LowLightParams {
  double gamma = 2.2;
  double gain = 0.3;
  double noise_sigma = 0.01;
};

/// out = clamp(gain * image^gamma + n, 0, 1) with n ~ N(0, noise_sigma) drawn
/// independently per pixel and channel.
inline Image synthesize_lowlight(const Image& image, const LowLightParams& p, std::uint64_t seed) {
  require(p.gamma > 0, "synthesize_lowlight: gamma must be > 0");
  require(p.gain > 0 && p.gain <= 1, "synthesize_lowlight: gain must be in (0,1]");
  require(p.noise_sigma >= 0, "synthesize_lowlight: noise_sigma must be >= 0");
  Image out = image;
  auto rng = make_rng(seed);
  std::normal_distribution<double> noise(0.0, p.noise_sigma > 0 ? p.noise_sigma : 1.0);
  for (auto& v : out) {
    double o = p.gain * std::pow(v, p.gamma);
    if (p.noise_sigma > 0) o += noise(rng);
    v = std::clamp(o, 0.0, 1.0);
  }
  return out;
}

inline ImageSample synthesize_lowlight(const ImageSample& s, const LowLightParams& p,
                                       std::uint64_t seed) {
  ImageSample out = s;
  out.image = synthesize_lowlight(s.image, p, seed);
  return out;
}

struct CrackStyle {
  int crack_width_px = 5;
  double contrast = 0.5;       // crack darkening in (0,1]
  double texture_scale = 8.0;  // value-noise lattice spacing in pixels
};

namespace detail {

// Smoothly interpolated lattice noise in [0,1].
inline Tensor<double> value_noise(int h, int w, double spacing, Rng& rng) {
  const int gh = static_cast<int>(std::ceil(h / spacing)) + 2;
  const int gw = static_cast<int>(std::ceil(w / spacing)) + 2;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> lattice(static_cast<std::size_t>(gh) * gw);
  for (auto& v : lattice) v = u(rng);
  auto smooth = [](double t) { return t * t * (3 - 2 * t); };
  Tensor<double> out(1, h, w);
  for (int y = 0; y < h; ++y) {
    const double fy = y / spacing;
    const int y0 = static_cast<int>(fy);
    const double ty = smooth(fy - y0);
    for (int x = 0; x < w; ++x) {
      const double fx = x / spacing;
      const int x0 = static_cast<int>(fx);
      const double tx = smooth(fx - x0);
      auto at = [&](int yy, int xx) { return lattice[static_cast<std::size_t>(yy) * gw + xx]; };
      const double top = at(y0, x0) + (at(y0, x0 + 1) - at(y0, x0)) * tx;
      const double bot = at(y0 + 1, x0) + (at(y0 + 1, x0 + 1) - at(y0 + 1, x0)) * tx;
      out(0, y, x) = top + (bot - top) * ty;
    }
  }
  return out;
}

inline std::size_t stamp_disk(Mask& mask, double cx, double cy, double radius) {
  std::size_t added = 0;
  const int y_lo = std::max(0, static_cast<int>(std::floor(cy - radius)));
  const int y_hi = std::min(mask.height() - 1, static_cast<int>(std::ceil(cy + radius)));
  const int x_lo = std::max(0, static_cast<int>(std::floor(cx - radius)));
  const int x_hi = std::min(mask.width() - 1, static_cast<int>(std::ceil(cx + radius)));
  for (int y = y_lo; y <= y_hi; ++y)
    for (int x = x_lo; x <= x_hi; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      if (dx * dx + dy * dy <= radius * radius && !mask(0, y, x)) {
        mask(0, y, x) = 1;
        ++added;
      }
    }
  return added;
}

// Random walk with bounded heading drift, stamped at every unit step.
inline void draw_walk(Mask& mask, Rng& rng, double x, double y, double heading, double radius,
                      std::size_t& fg, std::size_t budget) {
  std::normal_distribution<double> turn(0.0, 0.22);
  const double base = heading;
  const int max_steps = 4 * (mask.height() + mask.width());
  for (int step = 0; step < max_steps && fg < budget; ++step) {
    fg += stamp_disk(mask, x, y, radius);
    heading = std::clamp(heading + turn(rng), base - 1.0, base + 1.0);
    x += std::cos(heading);
    y += std::sin(heading);
    if (x < -radius || y < -radius || x > mask.width() + radius || y > mask.height() + radius)
      break;
  }
}

}  // namespace detail

/// Procedural crack sample: value-noise background with a dark random-walk
/// polyline of the configured width. Crack pixels are darker than every
/// background pixel, and the foreground fraction stays below 0.4.
inline ImageSample generate_synthetic_crack(int height, int width, std::uint64_t seed,
                                            const CrackStyle& style = {}) {
  require(height > 0 && width > 0 && height % 8 == 0 && width % 8 == 0,
          "generate_synthetic_crack: H and W must be positive multiples of 8");
  require(style.crack_width_px >= 1 && style.crack_width_px < std::min(height, width),
          "generate_synthetic_crack: crack_width_px must be in [1, min(H,W))");
  require(style.contrast > 0 && style.contrast <= 1,
          "generate_synthetic_crack: contrast must be in (0,1]");
  require(style.texture_scale > 0, "generate_synthetic_crack: texture_scale must be > 0");

  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  ImageSample s;
  s.id = "synth_" + std::to_string(seed);
  s.image = Image(3, height, width);
  s.mask = Mask(1, height, width);

  const double base = 0.5 + 0.22 * u(rng);
  const double amplitude = 0.12;
  double tint[3];
  for (double& t : tint) t = 0.06 * (u(rng) - 0.5);
  const auto coarse = detail::value_noise(height, width, style.texture_scale, rng);
  const auto fine = detail::value_noise(height, width, std::max(1.0, style.texture_scale / 3), rng);

  double background_min = 1.0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double t = 0.7 * coarse(0, y, x) + 0.3 * fine(0, y, x);
        const double v = std::clamp(base + tint[c] + amplitude * (2 * t - 1), 0.0, 1.0);
        s.image(c, y, x) = v;
        background_min = std::min(background_min, v);
      }

  const double radius = style.crack_width_px / 2.0;
  const std::size_t budget = static_cast<std::size_t>(0.4 * height * width);
  std::size_t fg = 0;
  // Enter from a random edge, heading roughly across the image.
  const int edge = static_cast<int>(rng() % 4);
  double x0 = 0, y0 = 0, heading = 0;
  const double pi = 3.14159265358979323846;
  switch (edge) {
    case 0: x0 = 0; y0 = u(rng) * height; heading = 0; break;
    case 1: x0 = width; y0 = u(rng) * height; heading = pi; break;
    case 2: x0 = u(rng) * width; y0 = 0; heading = pi / 2; break;
    default: x0 = u(rng) * width; y0 = height; heading = -pi / 2; break;
  }
  heading += (u(rng) - 0.5) * 0.8;
  detail::draw_walk(s.mask, rng, x0, y0, heading, radius, fg, budget);
  if (coin_flip(rng)) {
    // Thinner branch from a point on the main crack.
    std::vector<std::pair<int, int>> cells;
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        if (s.mask(0, y, x)) cells.emplace_back(x, y);
    if (!cells.empty()) {
      const auto [bx, by] = cells[rng() % cells.size()];
      const double branch_heading = heading + (coin_flip(rng) ? 1.0 : -1.0) * (0.6 + 0.6 * u(rng));
      detail::draw_walk(s.mask, rng, bx + 0.5, by + 0.5, branch_heading,
                        std::max(0.5, radius * 0.6), fg, budget);
    }
  }
  if (fg == 0) detail::stamp_disk(s.mask, width / 2.0, height / 2.0, std::max(radius, 0.75));

  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      if (!s.mask(0, y, x)) continue;
      const double shade = 0.85 + 0.15 * fine(0, y, x);
      for (int c = 0; c < 3; ++c)
        s.image(c, y, x) = (1 - style.contrast) * background_min * shade;
    }
  return s;
}

/// Mirrors image and mask left-right together.
inline ImageSample hflip(const ImageSample& s) {
  ImageSample out = s;
  const int w = s.width();
  for (int y = 0; y < s.height(); ++y)
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) out.image(c, y, x) = s.image(c, y, w - 1 - x);
      out.mask(0, y, x) = s.mask(0, y, w - 1 - x);
    }
  return out;
}

/// Flips with probability 0.5, decided by the seed.
inline ImageSample augment_hflip(const ImageSample& s, std::uint64_t seed) {
  auto rng = make_rng(seed);
  return coin_flip(rng) ? hflip(s) : s;
}

}  // namespace cracknex
