#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Core>

#include "cracknex/autograd.hpp"
#include "cracknex/resample.hpp"

namespace cracknex {

/// Border handling for convolutions. Reflect is half-sample symmetric
/// (d c b a | a b c d), which keeps constant inputs constant.
enum class PadMode { Zero, Circular, Reflect };

namespace ops {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Index into [0, n) or -1 for a zero-padded position.
inline int pad_index(int i, int n, PadMode mode) {
  if (i >= 0 && i < n) return i;
  switch (mode) {
    case PadMode::Zero:
      return -1;
    case PadMode::Circular:
      return ((i % n) + n) % n;
    case PadMode::Reflect: {
      const int period = 2 * n;
      int m = ((i % period) + period) % period;
      return m < n ? m : period - 1 - m;
    }
  }
  return -1;
}

// b must equal a in every dimension or be 1 there.
template <typename T>
bool broadcastable(const Tensor<T>& a, const Tensor<T>& b) {
  return (b.channels() == a.channels() || b.channels() == 1) &&
         (b.height() == a.height() || b.height() == 1) &&
         (b.width() == a.width() || b.width() == 1);
}

template <typename T>
std::size_t broadcast_offset(const Tensor<T>& b, int c, int y, int x) {
  const int bc = b.channels() == 1 ? 0 : c;
  const int by = b.height() == 1 ? 0 : y;
  const int bx = b.width() == 1 ? 0 : x;
  return (static_cast<std::size_t>(bc) * b.height() + by) * b.width() + bx;
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require(detail::broadcastable(a.value(), b.value()),
          "add: cannot broadcast " + b.value().shape_string() + " onto " +
              a.value().shape_string());
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out = av;
  if (av.same_shape(bv)) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  } else {
    for (int c = 0; c < av.channels(); ++c)
      for (int y = 0; y < av.height(); ++y)
        for (int x = 0; x < av.width(); ++x)
          out(c, y, x) += bv[detail::broadcast_offset(bv, c, y, x)];
  }
  return make_op<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) mutable {
    accumulate(a, g);
    if (!b.requires_grad()) return;
    auto& bg = b.mutable_grad();
    if (bg.same_shape(g)) {
      for (std::size_t i = 0; i < g.size(); ++i) bg[i] += g[i];
      return;
    }
    for (int c = 0; c < g.channels(); ++c)
      for (int y = 0; y < g.height(); ++y)
        for (int x = 0; x < g.width(); ++x)
          bg[detail::broadcast_offset(bg, c, y, x)] += g(c, y, x);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require(a.value().same_shape(b.value()), "sub: shape mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) mutable {
    accumulate(a, g);
    if (b.requires_grad()) {
      auto& bg = b.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) bg[i] -= g[i];
    }
  });
}

/// Elementwise product; b broadcasts onto a.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require(detail::broadcastable(a.value(), b.value()),
          "mul: cannot broadcast " + b.value().shape_string() + " onto " +
              a.value().shape_string());
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.channels(), av.height(), av.width());
  for (int c = 0; c < av.channels(); ++c)
    for (int y = 0; y < av.height(); ++y)
      for (int x = 0; x < av.width(); ++x)
        out(c, y, x) = av(c, y, x) * bv[detail::broadcast_offset(bv, c, y, x)];
  return make_op<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) mutable {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (a.requires_grad()) {
      auto& ag = a.mutable_grad();
      for (int c = 0; c < g.channels(); ++c)
        for (int y = 0; y < g.height(); ++y)
          for (int x = 0; x < g.width(); ++x)
            ag(c, y, x) += g(c, y, x) * bv[detail::broadcast_offset(bv, c, y, x)];
    }
    if (b.requires_grad()) {
      auto& bg = b.mutable_grad();
      for (int c = 0; c < g.channels(); ++c)
        for (int y = 0; y < g.height(); ++y)
          for (int x = 0; x < g.width(); ++x)
            bg[detail::broadcast_offset(bg, c, y, x)] += g(c, y, x) * av(c, y, x);
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out) v *= s;
  return make_op<T>(std::move(out), {a}, [a, s](const Tensor<T>& g) mutable {
    if (!a.requires_grad()) return;
    auto& ag = a.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) ag[i] += s * g[i];
  });
}

template <typename T>
Var<T> add_constant(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out) v += s;
  return make_op<T>(std::move(out), {a}, [a](const Tensor<T>& g) mutable { accumulate(a, g); });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out) v = std::max(v, T(0));
  return make_op<T>(std::move(out), {a}, [a](const Tensor<T>& g) mutable {
    if (!a.requires_grad()) return;
    auto& ag = a.mutable_grad();
    const auto& av = a.value();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (av[i] > T(0)) ag[i] += g[i];
  });
}

template <typename T>
T sigmoid_value(T z) {
  // Branches avoid overflow in exp for large |z|.
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out) v = sigmoid_value(v);
  Tensor<T> saved = out;
  return make_op<T>(std::move(out), {a}, [a, saved](const Tensor<T>& g) mutable {
    if (!a.requires_grad()) return;
    auto& ag = a.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * saved[i] * (T(1) - saved[i]);
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (auto v : a.value()) s += v;
  return make_op<T>(Tensor<T>::scalar(s), {a}, [a](const Tensor<T>& g) mutable {
    if (!a.requires_grad()) return;
    auto& ag = a.mutable_grad();
    for (auto& v : ag) v += g[0];
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

/// Stacks feature maps along the channel axis.
template <typename T>
Var<T> concat_channels(std::vector<Var<T>> parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  const int h = parts[0].height();
  const int w = parts[0].width();
  int total = 0;
  for (auto& p : parts) {
    require(p.height() == h && p.width() == w, "concat_channels: spatial size mismatch");
    total += p.channels();
  }
  Tensor<T> out(total, h, w);
  std::size_t offset = 0;
  for (auto& p : parts) {
    std::copy(p.value().begin(), p.value().end(), out.begin() + offset);
    offset += p.value().size();
  }
  return make_op<T>(std::move(out), parts, [parts](const Tensor<T>& g) mutable {
    std::size_t offset = 0;
    for (auto& p : parts) {
      const std::size_t n = p.value().size();
      if (p.requires_grad()) {
        auto& pg = p.mutable_grad();
        for (std::size_t i = 0; i < n; ++i) pg[i] += g[offset + i];
      }
      offset += n;
    }
  });
}

/// 2-D convolution with weights (Cout, Cin, k*k) and optional bias (Cout,1,1).
/// Padding is `dilation * (k-1)/2` on each side.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, int stride, int dilation,
              PadMode pad_mode) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  const int cin = xv.channels();
  const int cout = wv.channels();
  const int kk = wv.width();
  const int k = static_cast<int>(std::lround(std::sqrt(static_cast<double>(kk))));
  require(k * k == kk && k % 2 == 1, "conv2d: kernel must be odd and square");
  require(wv.height() == cin, "conv2d: weight expects " + std::to_string(wv.height()) +
                                  " input channels, got " + std::to_string(cin));
  require(stride >= 1 && dilation >= 1, "conv2d: stride and dilation must be positive");
  const int pad = dilation * (k - 1) / 2;
  const int h = xv.height();
  const int w = xv.width();
  const int oh = (h + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
  const int ow = (w + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
  require(oh > 0 && ow > 0, "conv2d: input too small");

  // Source index tables per kernel offset.
  std::vector<int> row_src(static_cast<std::size_t>(k) * oh);
  std::vector<int> col_src(static_cast<std::size_t>(k) * ow);
  for (int t = 0; t < k; ++t) {
    for (int o = 0; o < oh; ++o)
      row_src[t * oh + o] = detail::pad_index(o * stride - pad + t * dilation, h, pad_mode);
    for (int o = 0; o < ow; ++o)
      col_src[t * ow + o] = detail::pad_index(o * stride - pad + t * dilation, w, pad_mode);
  }

  const int rows = cin * kk;
  const int n = oh * ow;
  detail::RowMat<T> col(rows, n);
  for (int ci = 0; ci < cin; ++ci) {
    const T* src = xv.channel_data(ci);
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col.data() + static_cast<std::size_t>((ci * k + ky) * k + kx) * n;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = row_src[ky * oh + oy];
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = col_src[kx * ow + ox];
            dst[oy * ow + ox] = (iy < 0 || ix < 0) ? T(0) : src[iy * w + ix];
          }
        }
      }
    }
  }

  Tensor<T> out(cout, oh, ow);
  Eigen::Map<const detail::RowMat<T>> wm(wv.data(), cout, rows);
  Eigen::Map<detail::RowMat<T>> om(out.data(), cout, n);
  om.noalias() = wm * col;
  if (bias) {
    require(bias.value().size() == static_cast<std::size_t>(cout), "conv2d: bias size mismatch");
    for (int co = 0; co < cout; ++co) om.row(co).array() += bias.value()[co];
  }

  std::vector<Var<T>> parents{x, weight};
  if (bias) parents.push_back(bias);
  return make_op<T>(
      std::move(out), parents,
      [x, weight, bias, col = std::move(col), row_src = std::move(row_src),
       col_src = std::move(col_src), cin, cout, k, kk, h, w, oh, ow, rows,
       n](const Tensor<T>& g) mutable {
        Eigen::Map<const detail::RowMat<T>> gm(g.data(), cout, n);
        if (weight.requires_grad()) {
          Eigen::Map<detail::RowMat<T>> wg(weight.mutable_grad().data(), cout, rows);
          wg.noalias() += gm * col.transpose();
        }
        if (bias && bias.requires_grad()) {
          auto& bg = bias.mutable_grad();
          for (int co = 0; co < cout; ++co) bg[co] += gm.row(co).sum();
        }
        if (x.requires_grad()) {
          Eigen::Map<const detail::RowMat<T>> wm(weight.value().data(), cout, rows);
          detail::RowMat<T> dcol = wm.transpose() * gm;
          auto& xg = x.mutable_grad();
          for (int ci = 0; ci < cin; ++ci) {
            T* dst = xg.channel_data(ci);
            for (int ky = 0; ky < k; ++ky) {
              for (int kx = 0; kx < k; ++kx) {
                const T* src = dcol.data() + static_cast<std::size_t>((ci * k + ky) * k + kx) * n;
                for (int oy = 0; oy < oh; ++oy) {
                  const int iy = row_src[ky * oh + oy];
                  if (iy < 0) continue;
                  for (int ox = 0; ox < ow; ++ox) {
                    const int ix = col_src[kx * ow + ox];
                    if (ix >= 0) dst[iy * w + ix] += src[oy * ow + ox];
                  }
                }
              }
            }
          }
        }
        (void)kk;
        (void)h;
      });
}

/// Group normalization over (channels-in-group, H, W) with per-channel affine.
template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, int groups, T eps = T(1e-5)) {
  const auto& xv = x.value();
  const int c = xv.channels();
  require(groups >= 1 && c % groups == 0, "group_norm: channels not divisible by groups");
  require(gamma.value().size() == static_cast<std::size_t>(c) &&
              beta.value().size() == static_cast<std::size_t>(c),
          "group_norm: affine size mismatch");
  const int per = c / groups;
  const std::size_t plane = xv.plane();
  const std::size_t count = per * plane;
  Tensor<T> xhat(c, xv.height(), xv.width());
  std::vector<T> inv_std(groups);
  for (int gi = 0; gi < groups; ++gi) {
    const T* src = xv.channel_data(gi * per);
    T m = 0;
    for (std::size_t i = 0; i < count; ++i) m += src[i];
    m /= static_cast<T>(count);
    T var = 0;
    for (std::size_t i = 0; i < count; ++i) var += (src[i] - m) * (src[i] - m);
    var /= static_cast<T>(count);
    inv_std[gi] = T(1) / std::sqrt(var + eps);
    T* dst = xhat.channel_data(gi * per);
    for (std::size_t i = 0; i < count; ++i) dst[i] = (src[i] - m) * inv_std[gi];
  }
  Tensor<T> out(c, xv.height(), xv.width());
  for (int ch = 0; ch < c; ++ch) {
    const T gm = gamma.value()[ch];
    const T bt = beta.value()[ch];
    const T* src = xhat.channel_data(ch);
    T* dst = out.channel_data(ch);
    for (std::size_t i = 0; i < plane; ++i) dst[i] = gm * src[i] + bt;
  }
  return make_op<T>(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), groups, per,
       plane, count](const Tensor<T>& g) mutable {
        const int c = groups * per;
        if (gamma.requires_grad() || beta.requires_grad()) {
          auto& gg = gamma.mutable_grad();
          auto& bg = beta.mutable_grad();
          for (int ch = 0; ch < c; ++ch) {
            const T* gs = g.channel_data(ch);
            const T* xs = xhat.channel_data(ch);
            T sg = 0, sgx = 0;
            for (std::size_t i = 0; i < plane; ++i) {
              sg += gs[i];
              sgx += gs[i] * xs[i];
            }
            if (gamma.requires_grad()) gg[ch] += sgx;
            if (beta.requires_grad()) bg[ch] += sg;
          }
        }
        if (!x.requires_grad()) return;
        auto& xg = x.mutable_grad();
        std::vector<T> dxhat(count);
        for (int gi = 0; gi < groups; ++gi) {
          T s1 = 0, s2 = 0;
          for (int j = 0; j < per; ++j) {
            const int ch = gi * per + j;
            const T gm = gamma.value()[ch];
            const T* gs = g.channel_data(ch);
            const T* xs = xhat.channel_data(ch);
            for (std::size_t i = 0; i < plane; ++i) {
              const T d = gs[i] * gm;
              dxhat[j * plane + i] = d;
              s1 += d;
              s2 += d * xs[i];
            }
          }
          const T inv_n = T(1) / static_cast<T>(count);
          const T* xs = xhat.channel_data(gi * per);
          T* dst = xg.channel_data(gi * per);
          for (std::size_t i = 0; i < count; ++i)
            dst[i] += inv_std[gi] * (dxhat[i] - inv_n * s1 - xs[i] * inv_n * s2);
        }
      });
}


/// Bilinear resampling of every channel to (out_h, out_w).
template <typename T>
Var<T> resize_bilinear(Var<T> x, int out_h, int out_w) {
  const auto& xv = x.value();
  const int h = xv.height();
  const int w = xv.width();
  auto ty = linear_taps(h, out_h);
  auto tx = linear_taps(w, out_w);
  Tensor<T> out(xv.channels(), out_h, out_w);
  for (int c = 0; c < xv.channels(); ++c) {
    const T* src = xv.channel_data(c);
    T* dst = out.channel_data(c);
    for (int oy = 0; oy < out_h; ++oy) {
      const T fy = static_cast<T>(ty.frac[oy]);
      const T* r0 = src + ty.lo[oy] * w;
      const T* r1 = src + ty.hi[oy] * w;
      for (int ox = 0; ox < out_w; ++ox) {
        const T fx = static_cast<T>(tx.frac[ox]);
        const int x0 = tx.lo[ox], x1 = tx.hi[ox];
        const T top = r0[x0] + (r0[x1] - r0[x0]) * fx;
        const T bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
        dst[oy * out_w + ox] = top + (bot - top) * fy;
      }
    }
  }
  return make_op<T>(std::move(out), {x}, [x, ty, tx, w, out_h, out_w](const Tensor<T>& g) mutable {
    if (!x.requires_grad()) return;
    auto& xg = x.mutable_grad();
    for (int c = 0; c < xg.channels(); ++c) {
      const T* gs = g.channel_data(c);
      T* dst = xg.channel_data(c);
      for (int oy = 0; oy < out_h; ++oy) {
        const T fy = static_cast<T>(ty.frac[oy]);
        T* r0 = dst + ty.lo[oy] * w;
        T* r1 = dst + ty.hi[oy] * w;
        for (int ox = 0; ox < out_w; ++ox) {
          const T fx = static_cast<T>(tx.frac[ox]);
          const T gv = gs[oy * out_w + ox];
          const int x0 = tx.lo[ox], x1 = tx.hi[ox];
          r0[x0] += gv * (1 - fy) * (1 - fx);
          r0[x1] += gv * (1 - fy) * fx;
          r1[x0] += gv * fy * (1 - fx);
          r1[x1] += gv * fy * fx;
        }
      }
    }
  });
}

/// (C,H,W) -> (C,1,1) spatial mean.
template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.channels(), 1, 1);
  const std::size_t plane = xv.plane();
  for (int c = 0; c < xv.channels(); ++c) {
    const T* src = xv.channel_data(c);
    T s = 0;
    for (std::size_t i = 0; i < plane; ++i) s += src[i];
    out[c] = s / static_cast<T>(plane);
  }
  return make_op<T>(std::move(out), {x}, [x, plane](const Tensor<T>& g) mutable {
    if (!x.requires_grad()) return;
    auto& xg = x.mutable_grad();
    for (int c = 0; c < xg.channels(); ++c) {
      T* dst = xg.channel_data(c);
      const T v = g[c] / static_cast<T>(plane);
      for (std::size_t i = 0; i < plane; ++i) dst[i] += v;
    }
  });
}

/// (C,1,1) -> (C,h,w) by replication.
template <typename T>
Var<T> broadcast_spatial(Var<T> v, int h, int w) {
  require(v.height() == 1 && v.width() == 1, "broadcast_spatial: expects (C,1,1)");
  auto zeros = Var<T>::constant(Tensor<T>(v.channels(), h, w));
  return add(zeros, v);
}

/// Weighted spatial mean: sum_cells x * m / sum_cells m, with constant
/// per-cell weights m of shape (1,h,w). The weights must not sum to zero.
template <typename T>
Var<T> weighted_mean(Var<T> x, const Tensor<T>& weights) {
  const auto& xv = x.value();
  require(weights.channels() == 1 && weights.height() == xv.height() &&
              weights.width() == xv.width(),
          "weighted_mean: weight grid mismatch");
  T total = 0;
  for (auto m : weights) total += m;
  require(total != T(0), "weighted_mean: weights sum to zero");
  const std::size_t plane = xv.plane();
  Tensor<T> out(xv.channels(), 1, 1);
  for (int c = 0; c < xv.channels(); ++c) {
    const T* src = xv.channel_data(c);
    T s = 0;
    for (std::size_t i = 0; i < plane; ++i) s += src[i] * weights[i];
    out[c] = s / total;
  }
  return make_op<T>(std::move(out), {x}, [x, weights, total, plane](const Tensor<T>& g) mutable {
    if (!x.requires_grad()) return;
    auto& xg = x.mutable_grad();
    for (int c = 0; c < xg.channels(); ++c) {
      T* dst = xg.channel_data(c);
      const T v = g[c] / total;
      for (std::size_t i = 0; i < plane; ++i) dst[i] += v * weights[i];
    }
  });
}

/// Divides a (C,1,1) vector by its L2 norm; zero vectors pass through as zero.
template <typename T>
Var<T> l2_normalize(Var<T> v, T eps = T(1e-12)) {
  const auto& vv = v.value();
  T sq = 0;
  for (auto e : vv) sq += e * e;
  const T norm = std::sqrt(sq);
  Tensor<T> out = vv;
  if (norm > eps) {
    for (auto& e : out) e /= norm;
  } else {
    out.fill(T(0));
  }
  Tensor<T> unit = out;
  return make_op<T>(std::move(out), {v}, [v, unit, norm, eps](const Tensor<T>& g) mutable {
    if (!v.requires_grad() || norm <= eps) return;
    T dot = 0;
    for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * unit[i];
    auto& vg = v.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) vg[i] += (g[i] - unit[i] * dot) / norm;
  });
}

/// Per-cell cosine similarity between a (C,h,w) map and a (C,1,1) vector,
/// giving (1,h,w). A zero-norm operand yields similarity 0 with zero gradient.
template <typename T>
Var<T> cosine_map(Var<T> features, Var<T> proto, T eps = T(1e-12)) {
  const auto& fv = features.value();
  const auto& pv = proto.value();
  require(pv.size() == static_cast<std::size_t>(fv.channels()),
          "cosine_map: prototype has " + std::to_string(pv.size()) + " channels, features " +
              std::to_string(fv.channels()));
  const int c = fv.channels();
  const std::size_t plane = fv.plane();
  T pn = 0;
  for (auto e : pv) pn += e * e;
  pn = std::sqrt(pn);
  std::vector<T> fnorm(plane, T(0));
  std::vector<T> dots(plane, T(0));
  for (int ch = 0; ch < c; ++ch) {
    const T* src = fv.channel_data(ch);
    const T p = pv[ch];
    for (std::size_t i = 0; i < plane; ++i) {
      fnorm[i] += src[i] * src[i];
      dots[i] += src[i] * p;
    }
  }
  Tensor<T> out(1, fv.height(), fv.width());
  for (std::size_t i = 0; i < plane; ++i) {
    fnorm[i] = std::sqrt(fnorm[i]);
    out[i] = (fnorm[i] > eps && pn > eps) ? dots[i] / (fnorm[i] * pn) : T(0);
  }
  Tensor<T> sim = out;
  return make_op<T>(
      std::move(out), {features, proto},
      [features, proto, fnorm = std::move(fnorm), sim, pn, c, plane,
       eps](const Tensor<T>& g) mutable {
        if (pn <= eps) return;
        const auto& fv = features.value();
        const auto& pv = proto.value();
        // d cos / d f = p/(|f||p|) - cos f/|f|^2 ; d cos / d p = f/(|f||p|) - cos p/|p|^2
        Tensor<T>* fg = features.requires_grad() ? &features.mutable_grad() : nullptr;
        std::vector<T> pg(c, T(0));
        for (std::size_t i = 0; i < plane; ++i) {
          if (fnorm[i] <= eps || g[i] == T(0)) continue;
          const T inv = T(1) / (fnorm[i] * pn);
          const T cf = sim[i] / (fnorm[i] * fnorm[i]);
          const T cp = sim[i] / (pn * pn);
          for (int ch = 0; ch < c; ++ch) {
            const T f = fv[ch * plane + i];
            const T p = pv[ch];
            if (fg) (*fg)[ch * plane + i] += g[i] * (p * inv - cf * f);
            pg[ch] += g[i] * (f * inv - cp * p);
          }
        }
        if (proto.requires_grad()) {
          auto& pgrad = proto.mutable_grad();
          for (int ch = 0; ch < c; ++ch) pgrad[ch] += pg[ch];
        }
      });
}

/// Mean binary cross-entropy of probabilities against a constant 0/1 target.
/// Probabilities are clamped to [clamp, 1-clamp]; clamped cells get no gradient.
template <typename T>
Var<T> binary_cross_entropy(Var<T> pred, const Tensor<T>& target, T clamp = T(1e-7)) {
  const auto& pv = pred.value();
  require(pv.same_shape(target), "bce: shape mismatch " + pv.shape_string() + " vs " +
                                     target.shape_string());
  const T lo = clamp;
  const T hi = T(1) - clamp;
  T total = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const T p = std::clamp(pv[i], lo, hi);
    const T y = target[i];
    total -= y * std::log(p) + (T(1) - y) * std::log(T(1) - p);
  }
  const T n = static_cast<T>(pv.size());
  return make_op<T>(Tensor<T>::scalar(total / n), {pred},
                    [pred, target, lo, hi, n](const Tensor<T>& g) mutable {
                      if (!pred.requires_grad()) return;
                      const auto& pv = pred.value();
                      auto& pg = pred.mutable_grad();
                      for (std::size_t i = 0; i < pv.size(); ++i) {
                        const T p = pv[i];
                        if (p < lo || p > hi) continue;
                        const T y = target[i];
                        pg[i] += g[0] * (-y / p + (T(1) - y) / (T(1) - p)) / n;
                      }
                    });
}

}  // namespace ops
}  // namespace cracknex
