#pragma once

#include <cmath>
#include <vector>

#include "cracknex/protonet.hpp"

namespace cracknex {

struct LossWeights {
  double lambda1 = 1.0;  // support self-loss
  double lambda2 = 0.2;  // query self-loss

  void validate() const {
    require(std::isfinite(lambda1) && lambda1 >= 0, "loss weights: lambda1 must be finite and >= 0");
    require(std::isfinite(lambda2) && lambda2 >= 0, "loss weights: lambda2 must be finite and >= 0");
  }
};

template <typename T>
Tensor<T> mask_to_target(const Mask& mask) {
  return mask.template cast<T>();
}

/// Mean pixelwise binary cross-entropy; probabilities are clamped to
/// [1e-7, 1 - 1e-7].
template <typename T>
Var<T> bce(const Var<T>& pred, const Mask& target) {
  return ops::binary_cross_entropy(pred, mask_to_target<T>(target));
}

/// Self-matching loss of one prototype against the features it came from,
/// through the same temperature softmax as the prediction head.
template <typename T>
Var<T> self_match_loss(const Prototype<T>& proto, const FeatureMap<T>& features,
                       const Mask& mask, T temperature) {
  require(mask.height() == features.origin_h && mask.width() == features.origin_w,
          "self_match_loss: mask does not match feature origin size");
  const auto target = mask_to_grid<T>(mask, features.height(), features.width());
  return ops::binary_cross_entropy(match_grid(proto, features.grid, temperature), target);
}

/// Support self-support loss, averaged over shots. `reflectance` may be empty
/// (no reflectance branch); otherwise its prototype term is added per shot.
template <typename T>
Var<T> support_self_loss(const Prototype<T>& proto, const Prototype<T>* reflectance_proto,
                         const std::vector<FeatureMap<T>>& support,
                         const std::vector<FeatureMap<T>>& support_reflectance,
                         const std::vector<Mask>& masks, T temperature) {
  require(!support.empty() && support.size() == masks.size(),
          "support_self_loss: support/mask count mismatch");
  if (reflectance_proto) {
    require(support_reflectance.size() == support.size(),
            "support_self_loss: reflectance feature count mismatch");
  }
  Var<T> total;
  for (std::size_t k = 0; k < support.size(); ++k) {
    auto term = self_match_loss(proto, support[k], masks[k], temperature);
    if (reflectance_proto) {
      term = ops::add(term, self_match_loss(*reflectance_proto, support_reflectance[k],
                                            masks[k], temperature));
    }
    total = total ? ops::add(total, term) : term;
  }
  return ops::scale(total, T(1) / static_cast<T>(support.size()));
}

/// Query self-support loss: prototype pooled from the query's own features
/// under its ground-truth mask, matched back against those features.
template <typename T>
Var<T> query_self_loss(const FeatureMap<T>& query, const Mask& mask, T temperature) {
  const auto proto = masked_average_pool(query, mask);
  return self_match_loss(proto, query, mask, temperature);
}

/// L = L_seg + lambda1 * L_s + lambda2 * L_q.
template <typename T>
Var<T> total_loss(const Var<T>& seg, const Var<T>& support, const Var<T>& query,
                  const LossWeights& w) {
  return ops::add(ops::add(seg, ops::scale(support, static_cast<T>(w.lambda1))),
                  ops::scale(query, static_cast<T>(w.lambda2)));
}

inline double total_loss(double seg, double support, double query, const LossWeights& w) {
  return seg + w.lambda1 * support + w.lambda2 * query;
}

}  // namespace cracknex
