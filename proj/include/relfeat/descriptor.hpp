#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "relfeat/common.hpp"
#include "relfeat/dataset.hpp"
#include "relfeat/network.hpp"

namespace relfeat {

struct DescriptorOptions {
  bool include_conv = true;
  bool include_fc = true;
  // Read the rectified response when a relu directly follows the conv/fc layer.
  bool post_relu = true;
};

/// Maps flat descriptor indices to (layer, filter) pairs: one segment per contributing layer.
struct DescriptorLayout {
  struct Segment {
    int layer = 0;
    int channels = 0;
    std::size_t offset = 0;

    friend bool operator==(const Segment&, const Segment&) = default;
  };
  std::vector<Segment> segments;
  std::size_t m = 0;
  bool post_relu = true;

  friend bool operator==(const DescriptorLayout&, const DescriptorLayout&) = default;
};

inline DescriptorLayout make_layout(const Network& net, const DescriptorOptions& opt = {}) {
  DescriptorLayout layout;
  layout.post_relu = opt.post_relu;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const Layer& l = net.layers[i];
    if (net.in_tail(i)) break;
    const bool take = (l.kind == LayerKind::conv && opt.include_conv) || (l.kind == LayerKind::fc && opt.include_fc);
    if (!take) continue;
    layout.segments.push_back({static_cast<int>(i), l.units(), layout.m});
    layout.m += static_cast<std::size_t>(l.units());
  }
  if (layout.m == 0) throw std::invalid_argument("descriptor layout is empty: no conv/fc layer outside the classifier tail");
  return layout;
}

inline FeatureId feature_of_index(const DescriptorLayout& layout, std::size_t flat) {
  if (flat >= layout.m)
    throw std::out_of_range("descriptor index " + std::to_string(flat) + " >= m = " + std::to_string(layout.m));
  for (const auto& seg : layout.segments)
    if (flat < seg.offset + static_cast<std::size_t>(seg.channels))
      return {seg.layer, static_cast<int>(flat - seg.offset)};
  throw std::out_of_range("descriptor layout is inconsistent");
}

inline std::size_t index_of_feature(const DescriptorLayout& layout, FeatureId f) {
  for (const auto& seg : layout.segments)
    if (seg.layer == f.layer) {
      if (f.filter < 0 || f.filter >= seg.channels)
        throw std::out_of_range("feature " + to_string(f) + ": filter out of range");
      return seg.offset + static_cast<std::size_t>(f.filter);
    }
  throw std::out_of_range("feature " + to_string(f) + ": layer not part of the descriptor");
}

/// The activation tensor a feature's response is read from: the layer output,
/// or the following relu's output when `post_relu` is set and a relu follows.
inline std::size_t response_layer(const Network& net, std::size_t layer, bool post_relu) {
  if (post_relu && layer + 1 < net.layers.size() && net.layers[layer + 1].kind == LayerKind::relu) return layer + 1;
  return layer;
}

inline const Tensor& response_tensor(const Network& net, const ActivationTrace& trace, std::size_t layer,
                                     bool post_relu) {
  if (!trace.captured) throw std::invalid_argument("trace has no captured activations");
  return trace.outputs.at(response_layer(net, layer, post_relu));
}

struct ResponseDescriptor {
  std::vector<double> values;
  DescriptorLayout layout;
};

/// Per layer: channel-wise L2 norms, L1-normalised within the layer (all-zero layers stay zero), concatenated.
inline std::vector<double> descriptor_values(const ActivationTrace& trace, const Network& net,
                                             const DescriptorLayout& layout) {
  if (!trace.captured) throw std::invalid_argument("extract_descriptor: trace was recorded without activations");
  std::vector<double> x(layout.m, 0.0);
  for (const auto& seg : layout.segments) {
    const Tensor& r = response_tensor(net, trace, static_cast<std::size_t>(seg.layer), layout.post_relu);
    const auto norms = channel_l2(r);
    if (norms.size() != static_cast<std::size_t>(seg.channels))
      throw std::invalid_argument("descriptor layout does not match trace at layer " + std::to_string(seg.layer));
    double sum = 0.0;
    for (double v : norms) sum += v;
    if (sum > 0.0)
      for (std::size_t q = 0; q < norms.size(); ++q) x[seg.offset + q] = norms[q] / sum;
  }
  return x;
}

inline ResponseDescriptor extract_descriptor(const ActivationTrace& trace, const Network& net,
                                             const DescriptorLayout& layout) {
  return {descriptor_values(trace, net, layout), layout};
}

inline ResponseDescriptor extract_descriptor(const ActivationTrace& trace, const Network& net) {
  return extract_descriptor(trace, net, make_layout(net));
}

/// X (m x N, one descriptor per column) and the one-hot label matrix L (C x N).
struct DatasetMatrices {
  Eigen::MatrixXd X;
  Eigen::MatrixXd L;
  DescriptorLayout layout;

  std::size_t m() const { return static_cast<std::size_t>(X.rows()); }
  std::size_t n() const { return static_cast<std::size_t>(X.cols()); }
  std::size_t classes() const { return static_cast<std::size_t>(L.rows()); }
};

inline DatasetMatrices build_matrices(const Network& net, const LabeledDataset& data, const DescriptorLayout& layout,
                                      unsigned threads = 1) {
  if (data.empty()) throw DataError("build_matrices: empty dataset");
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data.labels[i] < 0 || data.labels[i] >= net.class_count)
      throw DataError("build_matrices: label " + std::to_string(data.labels[i]) + " of sample " + std::to_string(i) +
                      " outside [0, " + std::to_string(net.class_count) + ")");
  DatasetMatrices mats;
  mats.layout = layout;
  mats.X.setZero(static_cast<Eigen::Index>(layout.m), static_cast<Eigen::Index>(data.size()));
  mats.L.setZero(net.class_count, static_cast<Eigen::Index>(data.size()));
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const auto x = descriptor_values(forward(net, data.images[i], true), net, layout);
    for (std::size_t r = 0; r < x.size(); ++r) mats.X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = x[r];
  });
  for (std::size_t i = 0; i < data.size(); ++i) mats.L(data.labels[i], static_cast<Eigen::Index>(i)) = 1.0;
  return mats;
}

inline DatasetMatrices build_matrices(const Network& net, const LabeledDataset& data, unsigned threads = 1) {
  return build_matrices(net, data, make_layout(net), threads);
}

/// Text dump: header "m N C", then X row by row, then L row by row.
inline void write_matrices(std::ostream& out, const DatasetMatrices& mats) {
  out << mats.m() << ' ' << mats.n() << ' ' << mats.classes() << '\n';
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  auto dump = [&](const Eigen::MatrixXd& M) {
    for (Eigen::Index r = 0; r < M.rows(); ++r) {
      for (Eigen::Index c = 0; c < M.cols(); ++c) out << (c ? " " : "") << M(r, c);
      out << '\n';
    }
  };
  dump(mats.X);
  dump(mats.L);
}

/// Inverse of write_matrices. The layout is not stored; callers rebuild it from the model.
inline DatasetMatrices read_matrices(std::istream& in) {
  std::size_t m = 0, n = 0, c = 0;
  if (!(in >> m >> n >> c)) throw DataError("matrices: bad header (expected 'm N C')");
  DatasetMatrices mats;
  mats.X.resize(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  mats.L.resize(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(n));
  auto fill = [&](Eigen::MatrixXd& M, const char* what) {
    for (Eigen::Index r = 0; r < M.rows(); ++r)
      for (Eigen::Index k = 0; k < M.cols(); ++k)
        if (!(in >> M(r, k)))
          throw DataError(std::string("matrices: ") + what + " truncated at row " + std::to_string(r) + ", column " +
                          std::to_string(k));
  };
  fill(mats.X, "X");
  fill(mats.L, "L");
  std::string extra;
  if (in >> extra) throw DataError("matrices: trailing data after L");
  return mats;
}

inline void save_matrices(const DatasetMatrices& mats, const std::filesystem::path& path) {
  std::ostringstream s;
  write_matrices(s, mats);
  write_file(path, s.str());
}

inline DatasetMatrices load_matrices(const std::filesystem::path& path) {
  std::istringstream s(read_file(path));
  return read_matrices(s);
}

}  // namespace relfeat
