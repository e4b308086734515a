#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "relfeat/common.hpp"
#include "relfeat/tensor.hpp"

namespace relfeat::io {

/// 8-bit raster, interleaved channels (1 = gray, 3 = RGB), row-major.
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  friend bool operator==(const Raster&, const Raster&) = default;
};

inline void write_png(const std::filesystem::path& path, const Raster& r) {
  if (r.channels != 1 && r.channels != 3) throw std::invalid_argument("write_png: channels must be 1 or 3");
  if (r.pixels.size() != static_cast<std::size_t>(r.width) * r.height * r.channels)
    throw std::invalid_argument("write_png: pixel buffer size mismatch");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(r.width);
  img.height = static_cast<png_uint_32>(r.height);
  img.format = r.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, r.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw DataError("write_png " + path.string() + ": " + msg);
  }
}

inline Raster read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) throw DataError("read_png " + path.string() + ": " + img.message);
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Raster r{static_cast<int>(img.width), static_cast<int>(img.height), gray ? 1 : 3, {}};
  r.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, r.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw DataError("read_png " + path.string() + ": " + msg);
  }
  return r;
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

/// 1 x C x H x W tensor in [0, 1] to a raster (C must be 1 or 3).
inline Raster to_raster(const Tensor& t) {
  const Shape& s = t.shape();
  if (s.n != 1 || (s.c != 1 && s.c != 3)) throw std::invalid_argument("to_raster: expected 1x1xHxW or 1x3xHxW");
  Raster r{static_cast<int>(s.w), static_cast<int>(s.h), static_cast<int>(s.c), {}};
  r.pixels.resize(s.size());
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t x = 0; x < s.w; ++x)
      for (std::size_t c = 0; c < s.c; ++c) r.pixels[(y * s.w + x) * s.c + c] = to_byte(t.at(0, c, y, x));
  return r;
}

inline Tensor from_raster(const Raster& r) {
  const std::size_t c = static_cast<std::size_t>(r.channels), h = static_cast<std::size_t>(r.height),
                    w = static_cast<std::size_t>(r.width);
  Tensor t({1, c, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) t.at(0, k, y, x) = r.pixels[(y * w + x) * c + k] / 255.0f;
  return t;
}

}  // namespace relfeat::io
