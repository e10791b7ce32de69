#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cracknex/layers.hpp"
#include "cracknex/network.hpp"
#include "cracknex/resample.hpp"

namespace cracknex {

/// Foreground/background prototype pair, each (C,1,1).
template <typename T>
struct Prototype {
  Var<T> fg;
  Var<T> bg;
  // Set when the region was empty at feature resolution and the global
  // average was used instead.
  bool fg_fallback = false;
  bool bg_fallback = false;

  int channels() const { return fg.channels(); }
};

/// Masked average pooling. The mask is reduced to the feature grid by nearest
/// neighbour; an empty side falls back to the global feature mean.
template <typename T>
Prototype<T> masked_average_pool(const FeatureMap<T>& features, const Mask& mask) {
  require(mask.height() == features.origin_h && mask.width() == features.origin_w,
          "masked_average_pool: mask size does not match feature origin size");
  const auto fg_w = mask_to_grid<T>(mask, features.height(), features.width());
  Tensor<T> bg_w = fg_w;
  T fg_count = 0;
  for (auto& v : bg_w) {
    fg_count += v;
    v = T(1) - v;
  }
  const T bg_count = static_cast<T>(fg_w.size()) - fg_count;
  const Tensor<T> ones(1, features.height(), features.width(), T(1));
  Prototype<T> p;
  p.fg_fallback = fg_count == T(0);
  p.bg_fallback = bg_count == T(0);
  p.fg = ops::weighted_mean(features.grid, p.fg_fallback ? ones : fg_w);
  p.bg = ops::weighted_mean(features.grid, p.bg_fallback ? ones : bg_w);
  return p;
}

/// Per-side arithmetic mean of K prototypes.
template <typename T>
Prototype<T> merge_prototypes(const std::vector<Prototype<T>>& protos) {
  require(!protos.empty(), "merge_prototypes: empty prototype list");
  if (protos.size() == 1) return protos.front();
  const int c = protos.front().channels();
  Var<T> fg = protos.front().fg;
  Var<T> bg = protos.front().bg;
  for (std::size_t i = 1; i < protos.size(); ++i) {
    require(protos[i].channels() == c, "merge_prototypes: channel mismatch");
    fg = ops::add(fg, protos[i].fg);
    bg = ops::add(bg, protos[i].bg);
  }
  const T inv = T(1) / static_cast<T>(protos.size());
  Prototype<T> out;
  out.fg = ops::scale(fg, inv);
  out.bg = ops::scale(bg, inv);
  for (const auto& p : protos) {
    out.fg_fallback = out.fg_fallback || p.fg_fallback;
    out.bg_fallback = out.bg_fallback || p.bg_fallback;
  }
  return out;
}

/// Co-attention gate over an RGB prototype and its reflectance counterpart.
template <typename T>
struct PFMParams {
  int channels = 0;
  ConvLayer<T> mix;      // 2C -> 2C, 1x1
  Var<T> norm_gamma;     // (2C,1,1), scale after L2 normalisation
  Var<T> norm_beta;      // (2C,1,1)
  ConvLayer<T> f1;       // 2C -> C
  ConvLayer<T> f2;       // C -> C
  Var<T> alpha;          // (1,1,1), starts at 0

  static PFMParams init(int channels, Rng& rng) {
    PFMParams p;
    p.channels = channels;
    p.mix = ConvLayer<T>::kaiming(2 * channels, 2 * channels, 1, rng);
    p.norm_gamma = Var<T>::parameter(Tensor<T>(2 * channels, 1, 1, T(1)));
    p.norm_beta = Var<T>::parameter(Tensor<T>(2 * channels, 1, 1));
    p.f1 = ConvLayer<T>::kaiming(2 * channels, channels, 1, rng);
    p.f2 = ConvLayer<T>::kaiming(channels, channels, 1, rng);
    p.alpha = Var<T>::parameter(Tensor<T>::scalar(T(0)));
    return p;
  }

  void append(NamedParams<T>& out, const std::string& prefix) const {
    mix.append(out, prefix + ".mix");
    out.emplace_back(prefix + ".norm.gamma", norm_gamma);
    out.emplace_back(prefix + ".norm.beta", norm_beta);
    f1.append(out, prefix + ".f1");
    f2.append(out, prefix + ".f2");
    out.emplace_back(prefix + ".alpha", alpha);
  }
};

/// W = sigmoid(f2(relu(f1(X)))), X = affine(l2norm(mix([p; p_r]))).
template <typename T>
Var<T> pfm_attention(const Var<T>& p, const Var<T>& p_r, const PFMParams<T>& params) {
  require(p.channels() == params.channels && p_r.channels() == params.channels,
          "pfm: prototype width does not match module width");
  auto x = params.mix(ops::concat_channels<T>({p, p_r}));
  x = ops::l2_normalize(x);
  x = ops::add(ops::mul(x, params.norm_gamma), params.norm_beta);
  return ops::sigmoid(params.f2(ops::relu(params.f1(x))));
}

/// Gates both prototypes by (1 + alpha * W), fg and bg independently.
template <typename T>
std::pair<Prototype<T>, Prototype<T>> pfm_fuse(const Prototype<T>& p, const Prototype<T>& p_r,
                                               const PFMParams<T>& params) {
  Prototype<T> out = p;
  Prototype<T> out_r = p_r;
  auto gate_side = [&](const Var<T>& a, const Var<T>& b, Var<T>& a_out, Var<T>& b_out) {
    auto w = pfm_attention(a, b, params);
    auto gate = ops::add_constant(ops::mul(w, params.alpha), T(1));
    a_out = ops::mul(a, gate);
    b_out = ops::mul(b, gate);
  };
  gate_side(p.fg, p_r.fg, out.fg, out_r.fg);
  gate_side(p.bg, p_r.bg, out.bg, out_r.bg);
  return {out, out_r};
}

struct SSPConfig {
  double tau_fg = 0.7;
  double tau_bg = 0.6;
  double blend = 0.5;

  void validate() const {
    require(tau_fg > 0 && tau_fg < 1, "ssp: tau_fg must be in (0,1)");
    require(tau_bg > 0 && tau_bg < 1, "ssp: tau_bg must be in (0,1)");
    require(blend >= 0 && blend <= 1, "ssp: blend must be in [0,1]");
  }
};

/// Self-support augmentation: query cells confidently matching a prototype
/// side are averaged into a self prototype and blended with the support one.
template <typename T>
Prototype<T> ssp_augment(const Prototype<T>& proto, const FeatureMap<T>& query,
                         const SSPConfig& cfg) {
  cfg.validate();
  require(proto.channels() == query.channels(), "ssp_augment: channel mismatch");
  auto augment_side = [&](const Var<T>& side, double tau) -> Var<T> {
    const auto sim = ops::cosine_map(Var<T>::constant(query.grid.value()),
                                     Var<T>::constant(side.value()));
    Tensor<T> selection(1, query.height(), query.width());
    bool any = false;
    for (std::size_t i = 0; i < selection.size(); ++i) {
      if (sim.value()[i] > static_cast<T>(tau)) {
        selection[i] = T(1);
        any = true;
      }
    }
    if (!any || cfg.blend == 1.0) return side;
    auto self = ops::weighted_mean(query.grid, selection);
    return ops::add(ops::scale(side, static_cast<T>(cfg.blend)),
                    ops::scale(self, static_cast<T>(1.0 - cfg.blend)));
  };
  Prototype<T> out = proto;
  out.fg = augment_side(proto.fg, cfg.tau_fg);
  out.bg = augment_side(proto.bg, cfg.tau_bg);
  return out;
}

/// Foreground probability per feature cell:
/// exp(t s_fg) / (exp(t s_fg) + exp(t s_bg)) = sigmoid(t (s_fg - s_bg)).
template <typename T>
Var<T> match_grid(const Prototype<T>& proto, const Var<T>& features, T temperature) {
  require(temperature > T(0), "match: temperature must be > 0");
  auto s_fg = ops::cosine_map(features, proto.fg);
  auto s_bg = ops::cosine_map(features, proto.bg);
  return ops::sigmoid(ops::scale(ops::sub(s_fg, s_bg), temperature));
}

/// Foreground probability map at the input resolution (1, H, W).
template <typename T>
Var<T> match(const Prototype<T>& proto, const FeatureMap<T>& query, T temperature) {
  require(proto.channels() == query.channels(), "match: channel mismatch");
  auto grid = match_grid(proto, query.grid, temperature);
  return ops::resize_bilinear(grid, query.origin_h, query.origin_w);
}

}  // namespace cracknex
