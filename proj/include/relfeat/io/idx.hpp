#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "relfeat/common.hpp"
#include "relfeat/dataset.hpp"

namespace relfeat::io {

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::uint32_t be32(std::string_view bytes, std::size_t offset, const std::string& what) {
  if (offset + 4 > bytes.size())
    throw DataError(what + ": truncated header, need 4 bytes at offset " + std::to_string(offset) + ", file has " +
                    std::to_string(bytes.size()));
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
  return v;
}

inline std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

inline void check_payload(std::string_view bytes, std::size_t header, std::size_t payload, const std::string& what) {
  if (bytes.size() < header + payload)
    throw DataError(what + ": truncated at offset " + std::to_string(bytes.size()) + ", expected " +
                    std::to_string(header + payload) + " bytes");
  if (bytes.size() > header + payload)
    throw DataError(what + ": " + std::to_string(bytes.size() - header - payload) + " trailing bytes at offset " +
                    std::to_string(header + payload));
}

}  // namespace detail

struct IdxImages {
  std::uint32_t count = 0, rows = 0, cols = 0;
  std::string_view pixels;
};

inline IdxImages parse_idx_images(std::string_view bytes, const std::string& what = "idx images") {
  const std::uint32_t magic = detail::be32(bytes, 0, what);
  if (magic != kIdxImageMagic)
    throw DataError(what + ": bad magic at offset 0 (expected 0x00000803, got " + detail::hex32(magic) + ")");
  IdxImages r{detail::be32(bytes, 4, what), detail::be32(bytes, 8, what), detail::be32(bytes, 12, what), {}};
  const std::size_t payload = static_cast<std::size_t>(r.count) * r.rows * r.cols;
  detail::check_payload(bytes, 16, payload, what);
  r.pixels = bytes.substr(16, payload);
  return r;
}

inline std::string_view parse_idx_labels(std::string_view bytes, const std::string& what = "idx labels") {
  const std::uint32_t magic = detail::be32(bytes, 0, what);
  if (magic != kIdxLabelMagic)
    throw DataError(what + ": bad magic at offset 0 (expected 0x00000801, got " + detail::hex32(magic) + ")");
  const std::uint32_t count = detail::be32(bytes, 4, what);
  detail::check_payload(bytes, 8, count, what);
  return bytes.substr(8, count);
}

/// Builds a dataset from an IDX image/label pair. Pixels are scaled by 1/255;
/// classes are named "0".."9".
inline LabeledDataset parse_idx(std::string_view image_bytes, std::string_view label_bytes) {
  const IdxImages img = parse_idx_images(image_bytes);
  const std::string_view labels = parse_idx_labels(label_bytes);
  if (labels.size() != img.count)
    throw DataError("idx: " + std::to_string(img.count) + " images but " + std::to_string(labels.size()) + " labels");
  LabeledDataset d;
  for (int c = 0; c < 10; ++c) d.class_names.push_back(std::to_string(c));
  const std::size_t plane = static_cast<std::size_t>(img.rows) * img.cols;
  d.images.reserve(img.count);
  for (std::size_t i = 0; i < img.count; ++i) {
    Tensor t({1, 1, img.rows, img.cols});
    for (std::size_t k = 0; k < plane; ++k) t[k] = static_cast<unsigned char>(img.pixels[i * plane + k]) / 255.0f;
    d.images.push_back(std::move(t));
    const int label = static_cast<unsigned char>(labels[i]);
    if (label > 9) throw DataError("idx labels: value " + std::to_string(label) + " at offset " + std::to_string(8 + i));
    d.labels.push_back(label);
  }
  return d;
}

inline LabeledDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  return parse_idx(read_file(images), read_file(labels));
}

}  // namespace relfeat::io
