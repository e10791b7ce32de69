#pragma once

#include <array>
#include <concepts>
#include <string>
#include <vector>

#include "cracknex/layers.hpp"

namespace cracknex {

/// Spatial grid of C-dimensional features at a known stride of the input.
template <typename T>
struct FeatureMap {
  Var<T> grid;  // (C, h, w)
  int stride = 8;
  int origin_h = 0;
  int origin_w = 0;

  int channels() const { return grid.channels(); }
  int height() const { return grid.height(); }
  int width() const { return grid.width(); }
};

template <typename T>
Var<T> image_to_var(const Image& image) {
  return Var<T>::constant(image.template cast<T>());
}

/// Four conv stages at strides 2, 2, 2, 1 (overall stride 8). Every stage is
/// conv3x3 + group norm; all but the last are followed by ReLU so the output
/// features are signed.
template <typename T>
struct EncoderParams {
  static constexpr int kStages = 4;
  static constexpr std::array<int, kStages> kStrides{2, 2, 2, 1};

  int channels = 0;
  std::array<ConvLayer<T>, kStages> convs;
  std::array<GroupNormLayer<T>, kStages> norms;

  static int stem_width(int channels) { return std::max(4, channels / 2); }

  static EncoderParams init(int channels, Rng& rng) {
    require(channels >= 1, "EncoderParams: channel width must be >= 1");
    EncoderParams p;
    p.channels = channels;
    const std::array<int, kStages + 1> widths{3, stem_width(channels), channels, channels,
                                              channels};
    for (int i = 0; i < kStages; ++i) {
      p.convs[i] = ConvLayer<T>::kaiming(widths[i], widths[i + 1], 3, rng);
      p.norms[i] = GroupNormLayer<T>::make(widths[i + 1]);
    }
    return p;
  }

  void append(NamedParams<T>& out, const std::string& prefix) const {
    for (int i = 0; i < kStages; ++i) {
      convs[i].append(out, prefix + ".stage" + std::to_string(i) + ".conv");
      norms[i].append(out, prefix + ".stage" + std::to_string(i) + ".norm");
    }
  }
};

template <typename T>
FeatureMap<T> encode(const Var<T>& image, const EncoderParams<T>& params,
                     PadMode pad = PadMode::Zero) {
  const int h = image.height(), w = image.width();
  require(image.channels() == 3, "encode: expected a 3-channel image");
  require(h % 8 == 0 && w % 8 == 0 && h > 0 && w > 0,
          "encode: image size " + std::to_string(h) + "x" + std::to_string(w) +
              " is not divisible by 8");
  Var<T> x = image;
  for (int i = 0; i < EncoderParams<T>::kStages; ++i) {
    x = params.norms[i](params.convs[i](x, EncoderParams<T>::kStrides[i], 1, pad));
    if (i + 1 < EncoderParams<T>::kStages) x = ops::relu(x);
  }
  return {x, 8, h, w};
}

/// Adapter seam for alternative backbones (e.g. a pretrained network): any
/// callable mapping an image to a stride-8 FeatureMap.
template <typename E, typename T>
concept FeatureEncoder = requires(const E& e, const Var<T>& img) {
  { e(img) } -> std::convertible_to<FeatureMap<T>>;
};

template <typename T>
struct ConvEncoder {
  const EncoderParams<T>* params;
  PadMode pad = PadMode::Zero;
  FeatureMap<T> operator()(const Var<T>& image) const { return encode(image, *params, pad); }
};

template <typename T>
struct EncodedPairs {
  FeatureMap<T> query;                      // F_q
  FeatureMap<T> query_reflectance;          // F_r
  std::vector<FeatureMap<T>> support;       // F_s,s
  std::vector<FeatureMap<T>> support_reflectance;  // F_s,r
};

/// Runs the RGB encoder over query and supports and the reflectance encoder
/// over their reflectances. The same encoder object serves both sides of each
/// pair, so their weights are shared by construction.
template <typename T, FeatureEncoder<T> RgbEncoder, FeatureEncoder<T> ReflEncoder>
EncodedPairs<T> encode_pairs(const Var<T>& query, const Var<T>& query_reflectance,
                             const std::vector<Var<T>>& supports,
                             const std::vector<Var<T>>& support_reflectances,
                             const RgbEncoder& rgb, const ReflEncoder& refl) {
  require(supports.size() == support_reflectances.size(),
          "encode_pairs: support and reflectance counts differ");
  auto same_size = [&](const Var<T>& v) {
    return v.height() == query.height() && v.width() == query.width();
  };
  require(same_size(query_reflectance), "encode_pairs: query reflectance size mismatch");
  for (std::size_t i = 0; i < supports.size(); ++i) {
    require(same_size(supports[i]) && same_size(support_reflectances[i]),
            "encode_pairs: support " + std::to_string(i) + " size mismatch");
  }
  EncodedPairs<T> out;
  out.query = rgb(query);
  out.query_reflectance = refl(query_reflectance);
  for (std::size_t i = 0; i < supports.size(); ++i) {
    out.support.push_back(rgb(supports[i]));
    out.support_reflectance.push_back(refl(support_reflectances[i]));
  }
  return out;
}

/// Multi-rate context module on the stride-8 query features fused with
/// projected low-level features into a stride-4 map.
template <typename T>
struct ASPPParams {
  int channels = 0;
  std::array<int, 3> rates{6, 12, 18};
  ConvLayer<T> pointwise;            // 1x1 branch
  std::array<ConvLayer<T>, 3> atrous;  // 3x3 dilated branches
  ConvLayer<T> pool_proj;            // global-pool branch, 1x1
  ConvLayer<T> merge;                // 5C -> C, 1x1
  ConvLayer<T> low_level;            // C -> C, 1x1 on the low-level features
  ConvLayer<T> fuse1;                // 2C -> C, 3x3
  ConvLayer<T> fuse2;                // C -> C, 3x3

  static ASPPParams init(int channels, Rng& rng) {
    ASPPParams p;
    p.channels = channels;
    p.pointwise = ConvLayer<T>::kaiming(channels, channels, 1, rng);
    for (auto& a : p.atrous) a = ConvLayer<T>::kaiming(channels, channels, 3, rng);
    p.pool_proj = ConvLayer<T>::kaiming(channels, channels, 1, rng);
    p.merge = ConvLayer<T>::kaiming(5 * channels, channels, 1, rng);
    p.low_level = ConvLayer<T>::kaiming(channels, channels, 1, rng);
    p.fuse1 = ConvLayer<T>::kaiming(2 * channels, channels, 3, rng);
    p.fuse2 = ConvLayer<T>::kaiming(channels, channels, 3, rng);
    return p;
  }

  void append(NamedParams<T>& out, const std::string& prefix) const {
    pointwise.append(out, prefix + ".pointwise");
    for (int i = 0; i < 3; ++i) atrous[i].append(out, prefix + ".atrous" + std::to_string(i));
    pool_proj.append(out, prefix + ".pool_proj");
    merge.append(out, prefix + ".merge");
    low_level.append(out, prefix + ".low_level");
    fuse1.append(out, prefix + ".fuse1");
    fuse2.append(out, prefix + ".fuse2");
  }
};

template <typename T>
FeatureMap<T> aspp_fuse(const FeatureMap<T>& high, const FeatureMap<T>& low,
                        const ASPPParams<T>& p, PadMode pad = PadMode::Zero) {
  require(high.grid.value().same_shape(low.grid.value()),
          "aspp_fuse: feature shapes differ " + high.grid.value().shape_string() + " vs " +
              low.grid.value().shape_string());
  require(high.channels() == p.channels, "aspp_fuse: channel width mismatch");
  const int h = high.height(), w = high.width();
  std::vector<Var<T>> branches;
  branches.push_back(ops::relu(p.pointwise(high.grid, 1, 1, pad)));
  for (int i = 0; i < 3; ++i)
    branches.push_back(ops::relu(p.atrous[i](high.grid, 1, p.rates[i], pad)));
  auto pooled = ops::relu(p.pool_proj(ops::global_avg_pool(high.grid)));
  branches.push_back(ops::broadcast_spatial(pooled, h, w));
  auto trunk = ops::relu(p.merge(ops::concat_channels(branches)));
  trunk = ops::resize_bilinear(trunk, 2 * h, 2 * w);
  auto detail = ops::relu(p.low_level(low.grid));
  detail = ops::resize_bilinear(detail, 2 * h, 2 * w);
  auto fused = ops::relu(p.fuse1(ops::concat_channels<T>({trunk, detail}), 1, 1, pad));
  fused = p.fuse2(fused, 1, 1, pad);
  return {fused, high.stride / 2, high.origin_h, high.origin_w};
}

/// Plain stride-4 query path used when the context module is disabled:
/// bilinear x2 followed by an identity-initialised 1x1 projection.
template <typename T>
struct ProjectionParams {
  ConvLayer<T> proj;

  static ProjectionParams init(int channels) { return {ConvLayer<T>::identity(channels)}; }

  void append(NamedParams<T>& out, const std::string& prefix) const {
    proj.append(out, prefix + ".proj");
  }
};

template <typename T>
FeatureMap<T> project_upsample(const FeatureMap<T>& f, const ProjectionParams<T>& p) {
  auto up = ops::resize_bilinear(f.grid, 2 * f.height(), 2 * f.width());
  return {p.proj(up), f.stride / 2, f.origin_h, f.origin_w};
}

}  // namespace cracknex
