#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "relfeat/common.hpp"
#include "relfeat/descriptor.hpp"
#include "relfeat/io/png.hpp"
#include "relfeat/network.hpp"
#include "relfeat/tensor.hpp"

namespace relfeat {

enum class HeatmapMode { ours, deconv_gb_vanilla, upsampled_activation };

inline std::string_view to_string(HeatmapMode m) {
  switch (m) {
    case HeatmapMode::ours: return "ours";
    case HeatmapMode::deconv_gb_vanilla: return "deconv_gb_vanilla";
    case HeatmapMode::upsampled_activation: return "upsampled_activation";
  }
  return "?";
}

inline HeatmapMode parse_heatmap_mode(std::string_view s) {
  if (s == "ours") return HeatmapMode::ours;
  if (s == "deconv_gb_vanilla" || s == "deconv-gb") return HeatmapMode::deconv_gb_vanilla;
  if (s == "upsampled_activation" || s == "upsampled") return HeatmapMode::upsampled_activation;
  throw ConfigError("unknown heatmap mode '" + std::string(s) + "'");
}

struct BackwardPolicy {
  bool stride_fix = true;
  bool guided = true;
  // Also run strided max-pooling backward at stride 1 (resize + stride-1 argmax windows).
  bool pool_stride_fix = false;
};

inline BackwardPolicy policy_for(HeatmapMode m) {
  return {m == HeatmapMode::ours, true, false};
}

/// Instrumentation filled by deconv_backward: the stride each inverse convolution actually ran with.
struct BackwardStats {
  std::vector<int> conv_strides;
  int max_conv_stride() const {
    return conv_strides.empty() ? 0 : *std::max_element(conv_strides.begin(), conv_strides.end());
  }
};

/// Nearest-neighbour resize of the incoming map to A' = A + 2O - M + 1 so the
/// following inverse operation can run at stride 1.
inline Tensor compensate_stride(const Tensor& incoming, std::size_t input_side, int kernel, int stride, int pad) {
  const long side = stride_one_side(static_cast<long>(input_side), kernel, pad);
  if (side < 1)
    throw std::invalid_argument("compensate_stride: degenerate geometry A=" + std::to_string(input_side) +
                                " M=" + std::to_string(kernel) + " O=" + std::to_string(pad));
  if (stride == 1) return incoming;
  return nn_resize(incoming, static_cast<std::size_t>(side), static_cast<std::size_t>(side));
}

/// Max-pool backward through stride-1 windows: the signal is resized to A - M + 1
/// and routed to the argmax of each stride-1 window of the forward input.
inline Tensor unpool_stride_one(const Tensor& signal, const Tensor& forward_input, int window) {
  const std::size_t side = forward_input.shape().h - static_cast<std::size_t>(window) + 1;
  const Tensor resized = nn_resize(signal, side, forward_input.shape().w - static_cast<std::size_t>(window) + 1);
  const auto pooled = maxpool2d(forward_input, window, 1);
  return max_unpool(resized, pooled.switches, forward_input.shape());
}

/// Backward pass from filter q of layer p down to the input. The start signal is
/// the filter's response map (other channels zeroed); inverse rules per layer kind.
inline Tensor deconv_backward(const Network& net, const ActivationTrace& trace, FeatureId feature,
                              const BackwardPolicy& policy, BackwardStats* stats = nullptr,
                              bool post_relu = true) {
  if (!trace.captured) throw std::invalid_argument("deconv_backward: trace was recorded without activations");
  check_feature(net, feature);
  const std::size_t start = response_layer(net, static_cast<std::size_t>(feature.layer), post_relu);
  const Tensor& response = trace.outputs.at(start);
  Tensor g(response.shape());
  const auto src = response.channel(0, static_cast<std::size_t>(feature.filter));
  std::copy(src.begin(), src.end(), g.channel(0, static_cast<std::size_t>(feature.filter)).begin());

  for (std::size_t l = start + 1; l-- > 0;) {
    const Layer& layer = net.layers[l];
    const Tensor& x = trace.layer_input(l);
    switch (layer.kind) {
      case LayerKind::conv: {
        ConvSpec spec = layer.conv;
        if (policy.stride_fix && spec.stride > 1) {
          g = compensate_stride(g, x.shape().h, spec.kernel, spec.stride, spec.pad);
          spec.stride = 1;
        }
        if (stats) stats->conv_strides.push_back(spec.stride);
        g = conv2d_transpose(g, layer.weights, spec, x.shape().h, x.shape().w);
        break;
      }
      case LayerKind::relu:
        for (std::size_t k = 0; k < g.size(); ++k) {
          const bool pass = g[k] > 0.0f && (!policy.guided || x[k] > 0.0f);
          if (!pass) g[k] = 0.0f;
        }
        break;
      case LayerKind::maxpool:
        if (policy.pool_stride_fix && layer.stride > 1)
          g = unpool_stride_one(g, x, layer.window);
        else
          g = max_unpool(g, trace.switches[l], x.shape());
        break;
      case LayerKind::fc: g = matmul_transpose(g, layer.weights, x.shape()); break;
      case LayerKind::flatten: g = g.reshaped(x.shape()); break;
      case LayerKind::softmax: throw std::invalid_argument("deconv_backward: cannot start above the softmax");
    }
  }
  return g;
}

/// Input-resolution map in [0, 1] with the raw range it was normalised from.
struct Heatmap {
  Tensor values;  // 1 x 1 x H x W
  FeatureId source;
  HeatmapMode mode = HeatmapMode::ours;
  double raw_min = 0.0;
  double raw_max = 0.0;

  std::size_t height() const { return values.shape().h; }
  std::size_t width() const { return values.shape().w; }
};

namespace detail {

// Min-max normalisation; a constant nonzero map becomes all ones, an all-zero map stays zero.
inline void normalise(Heatmap& h) {
  auto v = h.values.values();
  if (v.empty()) return;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  h.raw_min = *lo;
  h.raw_max = *hi;
  if (h.raw_max == h.raw_min) {
    std::fill(v.begin(), v.end(), h.raw_max != 0.0 ? 1.0f : 0.0f);
    return;
  }
  const double span = h.raw_max - h.raw_min;
  for (float& x : v) x = static_cast<float>((x - h.raw_min) / span);
}

}  // namespace detail

/// Per-pixel max over channels of |value|, then min-max normalised.
inline Heatmap signal_to_heatmap(const Tensor& signal) {
  const Shape& s = signal.shape();
  if (s.n != 1) throw std::invalid_argument("signal_to_heatmap: expected a single image signal");
  Heatmap h;
  h.values = Tensor({1, 1, s.h, s.w});
  for (std::size_t c = 0; c < s.c; ++c) {
    const auto plane = signal.channel(0, c);
    for (std::size_t i = 0; i < plane.size(); ++i) h.values[i] = std::max(h.values[i], std::abs(plane[i]));
  }
  detail::normalise(h);
  return h;
}

/// Baseline: bilinear upscale of one conv channel's response to the input size.
inline Heatmap upsample_activation(const Network& net, const ActivationTrace& trace, FeatureId feature,
                                   bool post_relu = true) {
  check_feature(net, feature);
  if (net.layers[static_cast<std::size_t>(feature.layer)].kind != LayerKind::conv)
    throw std::invalid_argument("upsampled activation is not applicable to fc layers (feature " + to_string(feature) +
                                ")");
  const Tensor& r = response_tensor(net, trace, static_cast<std::size_t>(feature.layer), post_relu);
  const auto plane = r.channel(0, static_cast<std::size_t>(feature.filter));
  const Tensor channel({1, 1, r.shape().h, r.shape().w}, plane);
  Heatmap h;
  h.values = bilinear_resize(channel, trace.input.shape().h, trace.input.shape().w);
  h.source = feature;
  h.mode = HeatmapMode::upsampled_activation;
  detail::normalise(h);
  return h;
}

inline Heatmap feature_heatmap(const Network& net, const ActivationTrace& trace, FeatureId feature, HeatmapMode mode,
                               BackwardStats* stats = nullptr) {
  if (mode == HeatmapMode::upsampled_activation) return upsample_activation(net, trace, feature);
  Heatmap h = signal_to_heatmap(deconv_backward(net, trace, feature, policy_for(mode), stats));
  h.source = feature;
  h.mode = mode;
  return h;
}

/// Grid-artifact score: mean squared difference between h and its S x S box-filtered
/// version (window [i, i+S) x [j, j+S), in-bounds pixels only), over pixels with i, j multiples of S.
inline double lattice_energy(const Tensor& h, int period) {
  if (period < 2) throw std::invalid_argument("lattice_energy: period must be >= 2");
  const Shape& s = h.shape();
  if (s.n != 1 || s.c != 1) throw std::invalid_argument("lattice_energy: expected a 1x1xHxW map");
  const auto p = static_cast<std::size_t>(period);
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < s.h; i += p)
    for (std::size_t j = 0; j < s.w; j += p) {
      double box = 0.0;
      std::size_t n = 0;
      for (std::size_t y = i; y < std::min(s.h, i + p); ++y)
        for (std::size_t x = j; x < std::min(s.w, j + p); ++x, ++n) box += h.at(0, 0, y, x);
      const double d = h.at(0, 0, i, j) - box / static_cast<double>(n);
      acc += d * d;
      ++count;
    }
  return count ? acc / static_cast<double>(count) : 0.0;
}

inline double lattice_energy(const Heatmap& h, int period) { return lattice_energy(h.values, period); }

/// PNG (value = round(255 h)) plus a sidecar `<stem>.txt` with source, mode and raw range.
inline void write_heatmap(const Heatmap& h, const std::filesystem::path& png_path) {
  io::write_png(png_path, io::to_raster(h.values));
  std::ostringstream side;
  side << "feature " << to_string(h.source) << "\nmode " << to_string(h.mode) << "\nmin " << format_double(h.raw_min)
       << "\nmax " << format_double(h.raw_max) << "\n";
  auto sidecar = png_path;
  sidecar.replace_extension(".txt");
  write_file(sidecar, side.str());
}

}  // namespace relfeat
