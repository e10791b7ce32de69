#pragma once

#include <algorithm>
#include <cassert>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cracknex {

/// Dense planar tensor stored channel-major (C, H, W).
///
/// Feature maps, images, masks, prototypes (C, 1, 1) and scalars (1, 1, 1)
/// all share this layout. Convolution weights are stored as
/// (Cout, Cin, k*k).
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int channels, int height, int width, T fill = T(0))
      : c_(channels), h_(height), w_(width),
        data_(static_cast<std::size_t>(channels) * height * width, fill) {
    if (channels < 0 || height < 0 || width < 0) {
      throw std::invalid_argument("Tensor: negative dimension");
    }
  }

  static Tensor scalar(T v) { return Tensor(1, 1, 1, v); }

  static Tensor vector(std::span<const T> values) {
    Tensor t(static_cast<int>(values.size()), 1, 1);
    std::copy(values.begin(), values.end(), t.data_.begin());
    return t;
  }

  int channels() const { return c_; }
  int height() const { return h_; }
  int width() const { return w_; }
  std::size_t plane() const { return static_cast<std::size_t>(h_) * w_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  bool same_shape(const Tensor& o) const {
    return c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }

  std::string shape_string() const {
    return "(" + std::to_string(c_) + "," + std::to_string(h_) + "," +
           std::to_string(w_) + ")";
  }

  T& operator()(int c, int y, int x) {
    assert(c >= 0 && c < c_ && y >= 0 && y < h_ && x >= 0 && x < w_);
    return data_[(static_cast<std::size_t>(c) * h_ + y) * w_ + x];
  }
  const T& operator()(int c, int y, int x) const {
    assert(c >= 0 && c < c_ && y >= 0 && y < h_ && x >= 0 && x < w_);
    return data_[(static_cast<std::size_t>(c) * h_ + y) * w_ + x];
  }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T* channel_data(int c) { return data_.data() + c * plane(); }
  const T* channel_data(int c) const { return data_.data() + c * plane(); }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  auto begin() { return data_.begin(); }
  auto end() { return data_.end(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(c_, h_, w_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const Tensor& o) const = default;

 private:
  int c_ = 0;
  int h_ = 0;
  int w_ = 0;
  std::vector<T> data_;
};

/// RGB image in [0,1], stored (3, H, W).
using Image = Tensor<double>;
/// Binary mask with values exactly 0 or 1, stored (1, H, W).
using Mask = Tensor<unsigned char>;

inline void require(bool cond, const std::string& message) {
  if (!cond) throw std::invalid_argument(message);
}

}  // namespace cracknex
