#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "relfeat/common.hpp"

namespace relfeat {

// Buffers handed to Eigen share one base alignment so vectorized reductions
// take the same path on every allocation.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

struct Shape {
  std::size_t n = 0, c = 0, h = 0, w = 0;

  std::size_t size() const { return n * c * h * w; }
  std::size_t plane() const { return h * w; }
  std::size_t image_size() const { return c * h * w; }

  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return std::to_string(s.n) + "x" + std::to_string(s.c) + "x" + std::to_string(s.h) + "x" + std::to_string(s.w);
}

/// Dense NCHW array of 32-bit floats, row-major and contiguous.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f) : shape_(shape), data_(shape.size(), fill) {}
  Tensor(Shape shape, std::span<const float> values) : shape_(shape), data_(values.begin(), values.end()) {
    if (data_.size() != shape_.size())
      throw std::invalid_argument("Tensor: data length " + std::to_string(data_.size()) + " does not match shape " +
                                  to_string(shape_));
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  std::vector<float> vector() const { return {data_.begin(), data_.end()}; }

  float& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) { return data_[index(n, c, y, x)]; }
  float at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const { return data_[index(n, c, y, x)]; }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  std::span<float> channel(std::size_t n, std::size_t c) {
    return {data_.data() + (n * shape_.c + c) * shape_.plane(), shape_.plane()};
  }
  std::span<const float> channel(std::size_t n, std::size_t c) const {
    return {data_.data() + (n * shape_.c + c) * shape_.plane(), shape_.plane()};
  }

  Tensor reshaped(Shape s) const {
    if (s.size() != size()) throw std::invalid_argument("reshape: " + to_string(shape_) + " -> " + to_string(s));
    return Tensor(s, values());
  }

  Tensor image(std::size_t n) const {
    const std::size_t len = shape_.image_size();
    return Tensor({1, shape_.c, shape_.h, shape_.w}, values().subspan(n * len, len));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t index(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }

  Shape shape_;
  AlignedVector<float> data_;
};

/// Square convolution geometry: kernel side M, stride S, symmetric zero padding O.
struct ConvSpec {
  int kernel = 1;
  int stride = 1;
  int pad = 0;
  int in_channels = 1;
  int out_channels = 1;

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

/// Output side B = floor((A + 2O - M)/S) + 1. Throws when the padded input is smaller than the kernel.
inline std::size_t conv_output_side(std::size_t input, int kernel, int stride, int pad,
                                    const char* dimension = "spatial") {
  if (kernel < 1 || stride < 1 || pad < 0)
    throw std::invalid_argument(std::string("conv geometry: kernel, stride must be >= 1 and pad >= 0 (") + dimension +
                                ")");
  const long padded = static_cast<long>(input) + 2L * pad;
  if (padded < kernel)
    throw std::invalid_argument(std::string(dimension) + " size " + std::to_string(input) + " + 2*" +
                                std::to_string(pad) + " is smaller than kernel " + std::to_string(kernel));
  return static_cast<std::size_t>((padded - kernel) / stride + 1);
}

/// Like conv_output_side, but also rejects geometries that leave trailing rows/columns unvisited.
inline std::size_t exact_output_side(std::size_t input, int kernel, int stride, int pad,
                                     const char* dimension = "spatial") {
  const std::size_t b = conv_output_side(input, kernel, stride, pad, dimension);
  if ((static_cast<long>(input) + 2L * pad - kernel) % stride != 0)
    throw std::invalid_argument(std::string(dimension) + " size " + std::to_string(input) + " with kernel " +
                                std::to_string(kernel) + ", pad " + std::to_string(pad) + " is not divisible by stride " +
                                std::to_string(stride));
  return b;
}

/// Side of the map a stride-1 operation would produce: A + 2O - M + 1.
inline long stride_one_side(long input, int kernel, int pad) { return input + 2L * pad - kernel + 1; }

namespace detail {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// col has shape (C*M*M) x (Bh*Bw).
inline void im2col(const float* img, std::size_t channels, std::size_t height, std::size_t width, int kernel,
                   int stride, int pad, std::size_t out_h, std::size_t out_w, float* col) {
  const std::size_t cols = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    const float* plane = img + c * height * width;
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        float* row = col + ((c * kernel + ky) * kernel + kx) * cols;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const long iy = static_cast<long>(oy) * stride - pad + ky;
          float* dst = row + oy * out_w;
          if (iy < 0 || iy >= static_cast<long>(height)) {
            std::fill(dst, dst + out_w, 0.0f);
            continue;
          }
          const float* src = plane + static_cast<std::size_t>(iy) * width;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const long ix = static_cast<long>(ox) * stride - pad + kx;
            dst[ox] = (ix < 0 || ix >= static_cast<long>(width)) ? 0.0f : src[ix];
          }
        }
      }
    }
  }
}

// Scatter-add of col back into an image; the adjoint of im2col.
inline void col2im(const float* col, std::size_t channels, std::size_t height, std::size_t width, int kernel,
                   int stride, int pad, std::size_t out_h, std::size_t out_w, float* img) {
  const std::size_t cols = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    float* plane = img + c * height * width;
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const float* row = col + ((c * kernel + ky) * kernel + kx) * cols;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const long iy = static_cast<long>(oy) * stride - pad + ky;
          if (iy < 0 || iy >= static_cast<long>(height)) continue;
          float* dst = plane + static_cast<std::size_t>(iy) * width;
          const float* src = row + oy * out_w;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const long ix = static_cast<long>(ox) * stride - pad + kx;
            if (ix >= 0 && ix < static_cast<long>(width)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

inline void check_conv_weights(const Tensor& weights, const ConvSpec& spec) {
  const Shape expected{static_cast<std::size_t>(spec.out_channels), static_cast<std::size_t>(spec.in_channels),
                       static_cast<std::size_t>(spec.kernel), static_cast<std::size_t>(spec.kernel)};
  if (weights.shape() != expected)
    throw std::invalid_argument("conv weights: expected shape " + to_string(expected) + ", got " +
                                to_string(weights.shape()));
}

}  // namespace detail

/// Cross-correlation with zero padding. weights: (out, in, M, M).
inline Tensor conv2d(const Tensor& input, const Tensor& weights, std::span<const float> bias, const ConvSpec& spec) {
  const Shape& s = input.shape();
  if (s.c != static_cast<std::size_t>(spec.in_channels))
    throw std::invalid_argument("conv2d: input channels " + std::to_string(s.c) + " != spec.in_channels " +
                                std::to_string(spec.in_channels));
  detail::check_conv_weights(weights, spec);
  if (!bias.empty() && bias.size() != static_cast<std::size_t>(spec.out_channels))
    throw std::invalid_argument("conv2d: bias length " + std::to_string(bias.size()) + " != out_channels " +
                                std::to_string(spec.out_channels));
  const std::size_t out_h = conv_output_side(s.h, spec.kernel, spec.stride, spec.pad, "height");
  const std::size_t out_w = conv_output_side(s.w, spec.kernel, spec.stride, spec.pad, "width");
  const std::size_t k = s.c * spec.kernel * spec.kernel;
  const std::size_t cols = out_h * out_w;
  Tensor out({s.n, static_cast<std::size_t>(spec.out_channels), out_h, out_w});
  AlignedVector<float> col(k * cols);
  detail::ConstMatrixMap w(weights.data(), spec.out_channels, static_cast<Eigen::Index>(k));
  for (std::size_t n = 0; n < s.n; ++n) {
    detail::im2col(input.data() + n * s.image_size(), s.c, s.h, s.w, spec.kernel, spec.stride, spec.pad, out_h, out_w,
                   col.data());
    detail::MatrixMap o(out.data() + n * out.shape().image_size(), spec.out_channels, static_cast<Eigen::Index>(cols));
    o.noalias() = w * detail::ConstMatrixMap(col.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(cols));
    if (!bias.empty())
      for (int oc = 0; oc < spec.out_channels; ++oc) o.row(oc).array() += bias[static_cast<std::size_t>(oc)];
  }
  return out;
}

/// Exact adjoint of conv2d (bias excluded). The output side defaults to (B - 1)S + M - 2O; pass the
/// forward input size when the forward geometry left trailing rows unvisited.
inline Tensor conv2d_transpose(const Tensor& input, const Tensor& weights, const ConvSpec& spec, std::size_t out_h = 0,
                               std::size_t out_w = 0) {
  const Shape& s = input.shape();
  if (s.c != static_cast<std::size_t>(spec.out_channels))
    throw std::invalid_argument("conv2d_transpose: input channels " + std::to_string(s.c) + " != spec.out_channels " +
                                std::to_string(spec.out_channels));
  detail::check_conv_weights(weights, spec);
  const long min_h = (static_cast<long>(s.h) - 1) * spec.stride + spec.kernel - 2L * spec.pad;
  const long min_w = (static_cast<long>(s.w) - 1) * spec.stride + spec.kernel - 2L * spec.pad;
  if (s.h == 0 || s.w == 0 || min_h < 1 || min_w < 1)
    throw std::invalid_argument("conv2d_transpose: degenerate output size for input " + to_string(s));
  if (out_h == 0) out_h = static_cast<std::size_t>(min_h);
  if (out_w == 0) out_w = static_cast<std::size_t>(min_w);
  if (conv_output_side(out_h, spec.kernel, spec.stride, spec.pad, "height") != s.h ||
      conv_output_side(out_w, spec.kernel, spec.stride, spec.pad, "width") != s.w)
    throw std::invalid_argument("conv2d_transpose: requested output " + std::to_string(out_h) + "x" +
                                std::to_string(out_w) + " does not map onto input " + to_string(s));
  const std::size_t k = static_cast<std::size_t>(spec.in_channels) * spec.kernel * spec.kernel;
  const std::size_t cols = s.h * s.w;
  Tensor out({s.n, static_cast<std::size_t>(spec.in_channels), out_h, out_w});
  AlignedVector<float> col(k * cols);
  detail::ConstMatrixMap w(weights.data(), spec.out_channels, static_cast<Eigen::Index>(k));
  for (std::size_t n = 0; n < s.n; ++n) {
    detail::MatrixMap c(col.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(cols));
    c.noalias() = w.transpose() * detail::ConstMatrixMap(input.data() + n * s.image_size(), spec.out_channels,
                                                         static_cast<Eigen::Index>(cols));
    detail::col2im(col.data(), static_cast<std::size_t>(spec.in_channels), out_h, out_w, spec.kernel, spec.stride,
                   spec.pad, s.h, s.w, out.data() + n * out.shape().image_size());
  }
  return out;
}

/// Gradient of sum(grad_out * conv2d(input)) w.r.t. weights and bias, accumulated into the outputs.
inline void conv2d_accumulate_param_grads(const Tensor& input, const Tensor& grad_out, const ConvSpec& spec,
                                          Tensor& grad_weights, std::vector<float>& grad_bias) {
  const Shape& s = input.shape();
  const Shape& g = grad_out.shape();
  const std::size_t k = s.c * spec.kernel * spec.kernel;
  const std::size_t cols = g.h * g.w;
  AlignedVector<float> col(k * cols);
  detail::MatrixMap gw(grad_weights.data(), spec.out_channels, static_cast<Eigen::Index>(k));
  for (std::size_t n = 0; n < s.n; ++n) {
    detail::im2col(input.data() + n * s.image_size(), s.c, s.h, s.w, spec.kernel, spec.stride, spec.pad, g.h, g.w,
                   col.data());
    detail::ConstMatrixMap go(grad_out.data() + n * g.image_size(), spec.out_channels, static_cast<Eigen::Index>(cols));
    gw.noalias() +=
        go * detail::ConstMatrixMap(col.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(cols)).transpose();
    for (int oc = 0; oc < spec.out_channels; ++oc) grad_bias[static_cast<std::size_t>(oc)] += go.row(oc).sum();
  }
}

/// Max pooling output plus switches: per output cell, the row-major index of
/// the winning cell within its channel plane.
struct PoolResult {
  Tensor output;
  std::vector<std::uint32_t> switches;
};

inline PoolResult maxpool2d(const Tensor& input, int window, int stride) {
  const Shape& s = input.shape();
  if (window < 1 || stride < 1) throw std::invalid_argument("maxpool2d: window and stride must be >= 1");
  if (static_cast<std::size_t>(window) > s.h || static_cast<std::size_t>(window) > s.w)
    throw std::invalid_argument("maxpool2d: window " + std::to_string(window) + " larger than input " + to_string(s));
  const std::size_t out_h = conv_output_side(s.h, window, stride, 0, "height");
  const std::size_t out_w = conv_output_side(s.w, window, stride, 0, "width");
  PoolResult r{Tensor({s.n, s.c, out_h, out_w}), std::vector<std::uint32_t>(s.n * s.c * out_h * out_w)};
  std::size_t o = 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const auto plane = input.channel(n, c);
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        for (std::size_t ox = 0; ox < out_w; ++ox, ++o) {
          std::size_t best = oy * stride * s.w + ox * stride;
          float best_v = plane[best];
          for (int ky = 0; ky < window; ++ky) {
            for (int kx = 0; kx < window; ++kx) {
              const std::size_t idx = (oy * stride + ky) * s.w + ox * stride + kx;
              if (plane[idx] > best_v) {  // strict: first occurrence wins ties
                best_v = plane[idx];
                best = idx;
              }
            }
          }
          r.output[o] = best_v;
          r.switches[o] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  return r;
}

/// Routes each pooled value back to its recorded switch; adjoint of max pooling.
inline Tensor max_unpool(const Tensor& signal, std::span<const std::uint32_t> switches, const Shape& input_shape) {
  const Shape& s = signal.shape();
  if (switches.size() != s.size() || s.n != input_shape.n || s.c != input_shape.c)
    throw std::invalid_argument("max_unpool: switches do not match signal " + to_string(s));
  Tensor out(input_shape);
  std::size_t o = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      auto plane = out.channel(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i, ++o) plane[switches[o]] += signal[o];
    }
  return out;
}

/// Nearest-neighbour resampling, destination (i, j) <- source (floor(i*h/H), floor(j*w/W)).
inline Tensor nn_resize(const Tensor& input, std::size_t new_h, std::size_t new_w) {
  if (new_h < 1 || new_w < 1) throw std::invalid_argument("nn_resize: target size must be >= 1");
  const Shape& s = input.shape();
  if (s.h == 0 || s.w == 0) throw std::invalid_argument("nn_resize: empty input " + to_string(s));
  Tensor out({s.n, s.c, new_h, new_w});
  std::vector<std::size_t> src_x(new_w);
  for (std::size_t j = 0; j < new_w; ++j) src_x[j] = j * s.w / new_w;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const auto src = input.channel(n, c);
      auto dst = out.channel(n, c);
      for (std::size_t i = 0; i < new_h; ++i) {
        const std::size_t sy = i * s.h / new_h;
        for (std::size_t j = 0; j < new_w; ++j) dst[i * new_w + j] = src[sy * s.w + src_x[j]];
      }
    }
  return out;
}

/// Bilinear resampling with half-pixel centres and edge clamping.
inline Tensor bilinear_resize(const Tensor& input, std::size_t new_h, std::size_t new_w) {
  if (new_h < 1 || new_w < 1) throw std::invalid_argument("bilinear_resize: target size must be >= 1");
  const Shape& s = input.shape();
  Tensor out({s.n, s.c, new_h, new_w});
  auto axis = [](std::size_t dst, std::size_t src_len, std::size_t dst_len, std::size_t& lo, std::size_t& hi,
                 double& frac) {
    double x = (static_cast<double>(dst) + 0.5) * static_cast<double>(src_len) / static_cast<double>(dst_len) - 0.5;
    x = std::clamp(x, 0.0, static_cast<double>(src_len - 1));
    lo = static_cast<std::size_t>(std::floor(x));
    hi = std::min(lo + 1, src_len - 1);
    frac = x - static_cast<double>(lo);
  };
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const auto src = input.channel(n, c);
      auto dst = out.channel(n, c);
      for (std::size_t i = 0; i < new_h; ++i) {
        std::size_t y0, y1;
        double fy;
        axis(i, s.h, new_h, y0, y1, fy);
        for (std::size_t j = 0; j < new_w; ++j) {
          std::size_t x0, x1;
          double fx;
          axis(j, s.w, new_w, x0, x1, fx);
          const double top = (1 - fx) * src[y0 * s.w + x0] + fx * src[y0 * s.w + x1];
          const double bottom = (1 - fx) * src[y1 * s.w + x0] + fx * src[y1 * s.w + x1];
          dst[i * new_w + j] = static_cast<float>((1 - fy) * top + fy * bottom);
        }
      }
    }
  return out;
}

/// Per-channel L2 norm of a single image, accumulated in double.
inline std::vector<double> channel_l2(const Tensor& input) {
  const Shape& s = input.shape();
  if (s.n != 1) throw std::invalid_argument("channel_l2: expected a single image, got " + to_string(s));
  std::vector<double> norms(s.c);
  for (std::size_t c = 0; c < s.c; ++c) {
    double acc = 0.0;
    for (float v : input.channel(0, c)) acc += static_cast<double>(v) * v;
    norms[c] = std::sqrt(acc);
  }
  return norms;
}

inline Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (float& v : out.values()) v = v > 0.0f ? v : 0.0f;
  return out;
}

inline std::vector<float> softmax(std::span<const float> logits) {
  if (logits.empty()) return {};
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> e(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += e[i] = std::exp(static_cast<double>(logits[i]) - mx);
  std::vector<float> p(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) p[i] = static_cast<float>(e[i] / sum);
  return p;
}

/// Fully connected product y = W x + b per image. weights: (out, in, 1, 1); input flattened per image.
inline Tensor matmul(const Tensor& input, const Tensor& weights, std::span<const float> bias = {}) {
  const std::size_t in = input.shape().image_size();
  const std::size_t out_units = weights.shape().n;
  if (weights.shape().image_size() != in)
    throw std::invalid_argument("matmul: weight columns " + std::to_string(weights.shape().image_size()) +
                                " != input features " + std::to_string(in));
  if (!bias.empty() && bias.size() != out_units) throw std::invalid_argument("matmul: bias length mismatch");
  const std::size_t batch = input.shape().n;
  Tensor out({batch, out_units, 1, 1});
  detail::ConstMatrixMap w(weights.data(), static_cast<Eigen::Index>(out_units), static_cast<Eigen::Index>(in));
  detail::ConstMatrixMap x(input.data(), static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(in));
  detail::MatrixMap y(out.data(), static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(out_units));
  y.noalias() = x * w.transpose();
  if (!bias.empty())
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t o = 0; o < out_units; ++o) y(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(o)) += bias[o];
  return out;
}

/// Transpose product x = W^T y per image; output has `in_shape` per image.
inline Tensor matmul_transpose(const Tensor& signal, const Tensor& weights, const Shape& in_shape) {
  const std::size_t out_units = weights.shape().n;
  const std::size_t in = weights.shape().image_size();
  if (signal.shape().image_size() != out_units)
    throw std::invalid_argument("matmul_transpose: signal width " + std::to_string(signal.shape().image_size()) +
                                " != weight rows " + std::to_string(out_units));
  if (in_shape.image_size() != in) throw std::invalid_argument("matmul_transpose: target shape mismatch");
  const std::size_t batch = signal.shape().n;
  Tensor out({batch, in_shape.c, in_shape.h, in_shape.w});
  detail::ConstMatrixMap w(weights.data(), static_cast<Eigen::Index>(out_units), static_cast<Eigen::Index>(in));
  detail::ConstMatrixMap y(signal.data(), static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(out_units));
  detail::MatrixMap x(out.data(), static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(in));
  x.noalias() = y * w;
  return out;
}

inline Tensor multiply(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("multiply: shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("add: shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

inline double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

}  // namespace relfeat
