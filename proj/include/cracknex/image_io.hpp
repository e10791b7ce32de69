#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "cracknex/tensor.hpp"

namespace cracknex {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::vector<png_byte> read_png(const std::filesystem::path& path, png_uint_32 format,
                                      int& height, int& width) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    throw IoError("cannot read PNG '" + path.string() + "': " + img.message);
  }
  img.format = format;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG '" + path.string() + "': " + img.message);
  }
  height = static_cast<int>(img.height);
  width = static_cast<int>(img.width);
  return buffer;
}

inline void write_png(const std::filesystem::path& path, png_uint_32 format, int height,
                      int width, const std::vector<png_byte>& buffer) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.format = format;
  img.height = static_cast<png_uint_32>(height);
  img.width = static_cast<png_uint_32>(width);
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, buffer.data(), 0, nullptr)) {
    throw IoError("cannot write PNG '" + path.string() + "': " + img.message);
  }
}

inline png_byte quantize(double v) {
  return static_cast<png_byte>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

/// Reads any PNG as RGB in [0,1].
inline Image read_image_png(const std::filesystem::path& path) {
  int h = 0, w = 0;
  auto buf = detail::read_png(path, PNG_FORMAT_RGB, h, w);
  Image img(3, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img(c, y, x) = buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
  return img;
}

/// Reads any PNG as a single gray plane in [0,1].
inline Tensor<double> read_gray_png(const std::filesystem::path& path) {
  int h = 0, w = 0;
  auto buf = detail::read_png(path, PNG_FORMAT_GRAY, h, w);
  Tensor<double> out(1, h, w);
  for (std::size_t i = 0; i < buf.size(); ++i) out[i] = buf[i] / 255.0;
  return out;
}

inline void write_image_png(const std::filesystem::path& path, const Image& img) {
  require(img.channels() == 3, "write_image_png: expected 3 channels");
  const int h = img.height(), w = img.width();
  std::vector<png_byte> buf(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] = detail::quantize(img(c, y, x));
  detail::write_png(path, PNG_FORMAT_RGB, h, w, buf);
}

/// Writes a single-channel [0,1] plane as 8-bit gray.
inline void write_gray_png(const std::filesystem::path& path, const Tensor<double>& plane) {
  require(plane.channels() == 1, "write_gray_png: expected 1 channel");
  std::vector<png_byte> buf(plane.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = detail::quantize(plane[i]);
  detail::write_png(path, PNG_FORMAT_GRAY, plane.height(), plane.width(), buf);
}

/// Masks are stored as 0 (background) / 255 (crack).
inline void write_mask_png(const std::filesystem::path& path, const Mask& mask) {
  std::vector<png_byte> buf(mask.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = mask[i] ? 255 : 0;
  detail::write_png(path, PNG_FORMAT_GRAY, mask.height(), mask.width(), buf);
}

}  // namespace cracknex
