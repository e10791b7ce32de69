#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cracknex/ops.hpp"
#include "cracknex/random.hpp"

namespace cracknex {

/// Ordered (name, parameter) pairs; the order is the serialization order.
template <typename T>
using NamedParams = std::vector<std::pair<std::string, Var<T>>>;

template <typename T>
struct ConvLayer {
  Var<T> weight;  // (Cout, Cin, k*k)
  Var<T> bias;    // (Cout, 1, 1)

  int out_channels() const { return weight.channels(); }
  int in_channels() const { return weight.height(); }

  /// Kaiming fan-in initialisation, zero bias.
  static ConvLayer kaiming(int in, int out, int kernel, Rng& rng) {
    Tensor<T> w(out, in, kernel * kernel);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (in * kernel * kernel)));
    for (auto& v : w) v = static_cast<T>(dist(rng));
    return {Var<T>::parameter(std::move(w)), Var<T>::parameter(Tensor<T>(out, 1, 1))};
  }

  /// 1x1 convolution that copies its input (in == out).
  static ConvLayer identity(int channels) {
    Tensor<T> w(channels, channels, 1);
    for (int c = 0; c < channels; ++c) w(c, c, 0) = T(1);
    return {Var<T>::parameter(std::move(w)), Var<T>::parameter(Tensor<T>(channels, 1, 1))};
  }

  Var<T> operator()(Var<T> x, int stride = 1, int dilation = 1,
                    PadMode pad = PadMode::Zero) const {
    return ops::conv2d(x, weight, bias, stride, dilation, pad);
  }

  void append(NamedParams<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <typename T>
struct GroupNormLayer {
  Var<T> gamma;
  Var<T> beta;
  int groups = 1;

  static GroupNormLayer make(int channels) {
    GroupNormLayer n;
    n.gamma = Var<T>::parameter(Tensor<T>(channels, 1, 1, T(1)));
    n.beta = Var<T>::parameter(Tensor<T>(channels, 1, 1));
    n.groups = channels % 4 == 0 ? 4 : (channels % 2 == 0 ? 2 : 1);
    return n;
  }

  Var<T> operator()(Var<T> x) const { return ops::group_norm(x, gamma, beta, groups); }

  void append(NamedParams<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

/// Deep copy of a parameter list's values into fresh leaves.
template <typename T>
Var<T> clone_parameter(const Var<T>& p) {
  return Var<T>::parameter(p.value());
}

/// Same values, but as constants: no gradient bookkeeping on forward passes.
template <typename T>
Var<T> freeze_parameter(const Var<T>& p) {
  return Var<T>::constant(p.value());
}

}  // namespace cracknex
