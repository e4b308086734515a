#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <iterator>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "relfeat/common.hpp"
#include "relfeat/dataset.hpp"
#include "relfeat/tensor.hpp"

namespace relfeat {

enum class LayerKind { conv, relu, maxpool, flatten, fc, softmax };

inline std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::fc: return "fc";
    case LayerKind::softmax: return "softmax";
  }
  return "?";
}

struct Layer {
  LayerKind kind = LayerKind::relu;
  ConvSpec conv;        // conv
  int window = 0;       // maxpool
  int stride = 1;       // maxpool
  int fc_in = 0;        // fc
  int fc_out = 0;       // fc
  Tensor weights;       // conv: (out, in, M, M); fc: (out, in, 1, 1)
  std::vector<float> bias;

  bool parametric() const { return kind == LayerKind::conv || kind == LayerKind::fc; }
  int units() const {
    return kind == LayerKind::conv ? conv.out_channels : kind == LayerKind::fc ? fc_out : 0;
  }

  static Layer make_conv(int in, int out, int kernel, int stride, int pad) {
    Layer l;
    l.kind = LayerKind::conv;
    l.conv = {kernel, stride, pad, in, out};
    l.weights = Tensor({static_cast<std::size_t>(out), static_cast<std::size_t>(in), static_cast<std::size_t>(kernel),
                        static_cast<std::size_t>(kernel)});
    l.bias.assign(static_cast<std::size_t>(out), 0.0f);
    return l;
  }
  static Layer make_fc(int in, int out) {
    Layer l;
    l.kind = LayerKind::fc;
    l.fc_in = in;
    l.fc_out = out;
    l.weights = Tensor({static_cast<std::size_t>(out), static_cast<std::size_t>(in), 1, 1});
    l.bias.assign(static_cast<std::size_t>(out), 0.0f);
    return l;
  }
  static Layer make_pool(int window, int stride) {
    Layer l;
    l.kind = LayerKind::maxpool;
    l.window = window;
    l.stride = stride;
    return l;
  }
  static Layer make(LayerKind k) {
    Layer l;
    l.kind = k;
    return l;
  }
};

struct Network {
  std::vector<Layer> layers;
  int input_side = 0;
  int input_channels = 1;
  int class_count = 0;
  // Trailing layers excluded from descriptors (final fc + softmax by default).
  int classifier_tail_len = 2;

  std::size_t size() const { return layers.size(); }
  bool in_tail(std::size_t layer) const {
    return layer + static_cast<std::size_t>(classifier_tail_len) >= layers.size();
  }
};

/// Output shape of every layer for a single input image, chaining the conv shape law.
/// Throws std::invalid_argument naming the first incompatible layer.
inline std::vector<Shape> layer_output_shapes(const Network& net) {
  std::vector<Shape> shapes;
  Shape s{1, static_cast<std::size_t>(net.input_channels), static_cast<std::size_t>(net.input_side),
          static_cast<std::size_t>(net.input_side)};
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const Layer& l = net.layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + std::string(to_string(l.kind)) + "): ";
    try {
      switch (l.kind) {
        case LayerKind::conv:
          if (s.c != static_cast<std::size_t>(l.conv.in_channels))
            throw std::invalid_argument("input channels " + std::to_string(s.c) + " != in_channels " +
                                        std::to_string(l.conv.in_channels));
          s = {1, static_cast<std::size_t>(l.conv.out_channels),
               exact_output_side(s.h, l.conv.kernel, l.conv.stride, l.conv.pad, "height"),
               exact_output_side(s.w, l.conv.kernel, l.conv.stride, l.conv.pad, "width")};
          break;
        case LayerKind::maxpool:
          if (static_cast<std::size_t>(l.window) > s.h) throw std::invalid_argument("window larger than input");
          s = {1, s.c, exact_output_side(s.h, l.window, l.stride, 0, "height"),
               exact_output_side(s.w, l.window, l.stride, 0, "width")};
          break;
        case LayerKind::flatten: s = {1, s.image_size(), 1, 1}; break;
        case LayerKind::fc:
          if (s.image_size() != static_cast<std::size_t>(l.fc_in))
            throw std::invalid_argument("input width " + std::to_string(s.image_size()) + " != fc_in " +
                                        std::to_string(l.fc_in));
          s = {1, static_cast<std::size_t>(l.fc_out), 1, 1};
          break;
        case LayerKind::relu:
        case LayerKind::softmax: break;
      }
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(where + e.what());
    }
    shapes.push_back(s);
  }
  return shapes;
}

/// Structural checks: shape chain legal, softmax head preceded by an fc of width C, tail length sane.
inline void validate(const Network& net) {
  if (net.layers.size() < 2) throw std::invalid_argument("network needs at least an fc and a softmax layer");
  layer_output_shapes(net);
  const Layer& last = net.layers.back();
  const Layer& head = net.layers[net.layers.size() - 2];
  if (last.kind != LayerKind::softmax || head.kind != LayerKind::fc)
    throw std::invalid_argument("network must end with fc followed by softmax");
  if (head.fc_out != net.class_count)
    throw std::invalid_argument("final fc width " + std::to_string(head.fc_out) + " != class count " +
                                std::to_string(net.class_count));
  if (net.classifier_tail_len < 1 || static_cast<std::size_t>(net.classifier_tail_len) > net.layers.size())
    throw std::invalid_argument("classifier_tail_len out of range");
  for (const Layer& l : net.layers) {
    if (l.kind == LayerKind::conv) detail::check_conv_weights(l.weights, l.conv);
    if (l.kind == LayerKind::fc && l.weights.shape() != Shape{static_cast<std::size_t>(l.fc_out),
                                                               static_cast<std::size_t>(l.fc_in), 1, 1})
      throw std::invalid_argument("fc weights have wrong shape");
    if (l.parametric() && l.bias.size() != static_cast<std::size_t>(l.units()))
      throw std::invalid_argument("bias length mismatch");
  }
}

/// Seeded uniform init in +-sqrt(6 / (fan_in + fan_out)); biases zero.
inline void init_weights(Network& net, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "init"));
  for (Layer& l : net.layers) {
    if (!l.parametric()) continue;
    const Shape& s = l.weights.shape();
    const double fan_in = static_cast<double>(s.c * s.h * s.w);
    const double fan_out = static_cast<double>(s.n * s.h * s.w);
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (float& w : l.weights.values()) w = static_cast<float>(rng.uniform(-limit, limit));
    std::fill(l.bias.begin(), l.bias.end(), 0.0f);
  }
}

/// Two conv blocks + two fc layers. `first_stride` 2 gives the flower variant a strided first conv.
inline Network make_small_cnn(int input_side, int input_channels, int classes, bool strided_first,
                              std::uint64_t seed) {
  Network net;
  net.input_side = input_side;
  net.input_channels = input_channels;
  net.class_count = classes;
  if (strided_first)
    net.layers.push_back(Layer::make_conv(input_channels, 16, 4, 2, 1));
  else
    net.layers.push_back(Layer::make_conv(input_channels, 16, 5, 1, 0));
  net.layers.push_back(Layer::make(LayerKind::relu));
  net.layers.push_back(Layer::make_pool(2, 2));
  net.layers.push_back(Layer::make_conv(16, 32, 5, 1, 0));
  net.layers.push_back(Layer::make(LayerKind::relu));
  net.layers.push_back(Layer::make_pool(2, 2));
  net.layers.push_back(Layer::make(LayerKind::flatten));
  const auto shapes = layer_output_shapes(net);
  net.layers.push_back(Layer::make_fc(static_cast<int>(shapes.back().image_size()), 128));
  net.layers.push_back(Layer::make(LayerKind::relu));
  net.layers.push_back(Layer::make_fc(128, classes));
  net.layers.push_back(Layer::make(LayerKind::softmax));
  validate(net);
  init_weights(net, seed);
  return net;
}

inline Network make_mnist_net(std::uint64_t seed, int classes = 10) { return make_small_cnn(28, 1, classes, false, seed); }
inline Network make_flower_net(int classes, std::uint64_t seed, int input_side = 64) {
  return make_small_cnn(input_side, 3, classes, true, seed);
}

struct ActivationTrace {
  Tensor input;
  std::vector<Tensor> outputs;                        // one per layer when captured
  std::vector<std::vector<std::uint32_t>> switches;   // non-empty for maxpool layers
  std::vector<float> logits;
  std::vector<float> probabilities;
  int predicted = 0;
  bool captured = false;

  const Tensor& layer_input(std::size_t layer) const { return layer == 0 ? input : outputs.at(layer - 1); }
};

inline int argmax(std::span<const float> v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);  // lowest index wins ties
  return best;
}

inline Tensor apply_layer(const Layer& l, const Tensor& x, std::vector<std::uint32_t>* switches) {
  switch (l.kind) {
    case LayerKind::conv: return conv2d(x, l.weights, l.bias, l.conv);
    case LayerKind::relu: return relu(x);
    case LayerKind::maxpool: {
      auto r = maxpool2d(x, l.window, l.stride);
      if (switches) *switches = std::move(r.switches);
      return std::move(r.output);
    }
    case LayerKind::flatten: return x.reshaped({x.shape().n, x.shape().image_size(), 1, 1});
    case LayerKind::fc: return matmul(x, l.weights, l.bias);
    case LayerKind::softmax: {
      Tensor out = x;
      for (std::size_t n = 0; n < x.shape().n; ++n) {
        const auto p = softmax({x.data() + n * x.shape().image_size(), x.shape().image_size()});
        std::copy(p.begin(), p.end(), out.data() + n * x.shape().image_size());
      }
      return out;
    }
  }
  return x;
}

/// Forward pass of one image. With `capture`, every layer output and pooling switch is kept.
inline ActivationTrace forward(const Network& net, const Tensor& image, bool capture = true) {
  const Shape& s = image.shape();
  if (s.n != 1 || s.h != static_cast<std::size_t>(net.input_side) || s.w != static_cast<std::size_t>(net.input_side) ||
      s.c != static_cast<std::size_t>(net.input_channels))
    throw std::invalid_argument("forward: image shape " + to_string(s) + " does not match network input 1x" +
                                std::to_string(net.input_channels) + "x" + std::to_string(net.input_side) + "x" +
                                std::to_string(net.input_side));
  ActivationTrace t;
  t.captured = capture;
  if (capture) {
    t.input = image;
    t.outputs.reserve(net.layers.size());
    t.switches.resize(net.layers.size());
  }
  Tensor x = image;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const Layer& l = net.layers[i];
    if (l.kind == LayerKind::softmax) t.logits = x.vector();
    x = apply_layer(l, x, capture ? &t.switches[i] : nullptr);
    if (capture) t.outputs.push_back(x);
  }
  t.probabilities = x.vector();
  t.predicted = argmax(t.probabilities);
  return t;
}

inline int predict(const Network& net, const Tensor& image) { return forward(net, image, false).predicted; }

inline double accuracy(const Network& net, const LabeledDataset& data, unsigned threads = 1) {
  if (data.empty()) throw DataError("accuracy: empty dataset");
  std::vector<int> hit(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) { hit[i] = predict(net, data.images[i]) == data.labels[i]; });
  return static_cast<double>(std::accumulate(hit.begin(), hit.end(), 0)) / static_cast<double>(data.size());
}

/// Parameter gradients with the same layout as the network's parametric layers.
struct Gradients {
  std::vector<Tensor> weights;
  std::vector<std::vector<float>> bias;

  explicit Gradients(const Network& net) {
    for (const Layer& l : net.layers) {
      weights.emplace_back(l.parametric() ? Tensor(l.weights.shape()) : Tensor());
      bias.emplace_back(l.parametric() ? std::vector<float>(l.bias.size(), 0.0f) : std::vector<float>());
    }
  }
  void zero() {
    for (auto& w : weights) std::fill(w.values().begin(), w.values().end(), 0.0f);
    for (auto& b : bias) std::fill(b.begin(), b.end(), 0.0f);
  }
  void add(const Gradients& g) {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      for (std::size_t k = 0; k < weights[i].size(); ++k) weights[i][k] += g.weights[i][k];
      for (std::size_t k = 0; k < bias[i].size(); ++k) bias[i][k] += g.bias[i][k];
    }
  }
};

/// Cross-entropy loss of one captured trace and its parameter gradients (written into `grads`, which is zeroed).
inline double backprop(const Network& net, const ActivationTrace& trace, int label, Gradients& grads) {
  if (!trace.captured) throw std::invalid_argument("backprop: trace was not captured");
  grads.zero();
  const std::size_t n_layers = net.layers.size();
  const auto& p = trace.probabilities;
  const double loss = -std::log(std::max(1e-12, static_cast<double>(p.at(static_cast<std::size_t>(label)))));
  // Gradient at the softmax input (fused softmax + cross-entropy).
  Tensor g({1, p.size(), 1, 1});
  for (std::size_t c = 0; c < p.size(); ++c) g[c] = p[c] - (static_cast<int>(c) == label ? 1.0f : 0.0f);
  std::size_t l = n_layers;
  if (net.layers.back().kind == LayerKind::softmax) --l;
  while (l-- > 0) {
    const Layer& layer = net.layers[l];
    const Tensor& x = trace.layer_input(l);
    switch (layer.kind) {
      case LayerKind::fc: {
        const std::size_t in = x.shape().image_size();
        auto& gw = grads.weights[l];
        for (std::size_t o = 0; o < static_cast<std::size_t>(layer.fc_out); ++o) {
          const float go = g[o];
          grads.bias[l][o] += go;
          if (go == 0.0f) continue;
          float* row = gw.data() + o * in;
          for (std::size_t k = 0; k < in; ++k) row[k] += go * x[k];
        }
        if (l > 0) g = matmul_transpose(g, layer.weights, x.shape());
        break;
      }
      case LayerKind::conv:
        conv2d_accumulate_param_grads(x, g, layer.conv, grads.weights[l], grads.bias[l]);
        if (l > 0) g = conv2d_transpose(g, layer.weights, layer.conv, x.shape().h, x.shape().w);
        break;
      case LayerKind::relu:
        for (std::size_t k = 0; k < g.size(); ++k)
          if (x[k] <= 0.0f) g[k] = 0.0f;
        break;
      case LayerKind::maxpool: g = max_unpool(g, trace.switches[l], x.shape()); break;
      case LayerKind::flatten: g = g.reshaped(x.shape()); break;
      case LayerKind::softmax: throw std::invalid_argument("backprop: softmax must be the final layer");
    }
  }
  return loss;
}

struct Hyperparams {
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int lr_decay_every = 0;  // epochs; 0 disables step decay
  double lr_decay = 0.5;
  unsigned threads = 1;
};

struct EpochStats {
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
};

/// Minibatch SGD with momentum. Per-sample gradients are summed in sample order,
/// so results are bit-identical for any thread count.
class Trainer {
 public:
  Trainer(Network net, Hyperparams hp) : net_(std::move(net)), hp_(hp), velocity_(net_) {
    validate(net_);
    if (hp_.batch_size < 1 || hp_.epochs < 0 || hp_.learning_rate <= 0.0)
      throw ConfigError("train: batch_size >= 1, epochs >= 0 and learning_rate > 0 required");
  }

  const Network& network() const { return net_; }
  Network release() { return std::move(net_); }
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }

  /// One SGD step on the given sample indices; returns the mean loss before the update.
  double step(const LabeledDataset& data, std::span<const std::size_t> batch, int* correct = nullptr) {
    const std::size_t b = batch.size();
    if (b == 0) return 0.0;
    const unsigned workers = std::max(1u, std::min<unsigned>(hp_.threads, static_cast<unsigned>(b)));
    while (scratch_.size() < (workers == 1 ? 1 : b)) scratch_.emplace_back(net_);
    std::vector<double> losses(b);
    std::vector<int> hits(b);
    Gradients total(net_);
    if (workers == 1) {
      for (std::size_t i = 0; i < b; ++i) {
        const auto trace = forward(net_, data.images[batch[i]], true);
        hits[i] = trace.predicted == data.labels[batch[i]];
        losses[i] = backprop(net_, trace, data.labels[batch[i]], scratch_[0]);
        total.add(scratch_[0]);
      }
    } else {
      parallel_for(b, workers, [&](std::size_t i) {
        const auto trace = forward(net_, data.images[batch[i]], true);
        hits[i] = trace.predicted == data.labels[batch[i]];
        losses[i] = backprop(net_, trace, data.labels[batch[i]], scratch_[i]);
      });
      for (std::size_t i = 0; i < b; ++i) total.add(scratch_[i]);
    }
    apply(total, b);
    if (correct) *correct = std::accumulate(hits.begin(), hits.end(), 0);
    double sum = 0.0;
    for (double v : losses) sum += v;
    if (!std::isfinite(sum)) throw NumericError("train: loss became non-finite");
    return sum / static_cast<double>(b);
  }

  EpochStats epoch(const LabeledDataset& data, Rng& rng) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double loss = 0.0;
    int correct = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hp_.batch_size)) {
      const std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(hp_.batch_size), order.size() - start);
      int c = 0;
      loss += step(data, std::span<const std::size_t>(order.data() + start, len), &c) * static_cast<double>(len);
      correct += c;
    }
    return {loss / static_cast<double>(data.size()), static_cast<double>(correct) / static_cast<double>(data.size())};
  }

 private:
  void apply(const Gradients& g, std::size_t batch) {
    const float scale = 1.0f / static_cast<float>(batch);
    const float mom = static_cast<float>(hp_.momentum);
    const float lr = static_cast<float>(lr_);
    const float wd = static_cast<float>(hp_.weight_decay);
    for (std::size_t l = 0; l < net_.layers.size(); ++l) {
      Layer& layer = net_.layers[l];
      if (!layer.parametric()) continue;
      for (std::size_t k = 0; k < layer.weights.size(); ++k) {
        float& v = velocity_.weights[l][k];
        v = mom * v - lr * (g.weights[l][k] * scale + wd * layer.weights[k]);
        layer.weights[k] += v;
      }
      for (std::size_t k = 0; k < layer.bias.size(); ++k) {
        float& v = velocity_.bias[l][k];
        v = mom * v - lr * g.bias[l][k] * scale;
        layer.bias[k] += v;
      }
    }
  }

  Network net_;
  Hyperparams hp_;
  Gradients velocity_;
  std::vector<Gradients> scratch_;
  double lr_ = hp_.learning_rate;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
};

inline Network train(Network net, const LabeledDataset& data, const Hyperparams& hp, std::uint64_t seed,
                     TrainReport* report = nullptr,
                     const std::function<void(int, const EpochStats&)>& on_epoch = {}) {
  if (data.empty()) throw DataError("train: empty dataset");
  data.validate();
  if (data.class_count() > net.class_count)
    throw DataError("train: dataset has " + std::to_string(data.class_count()) + " classes, network " +
                    std::to_string(net.class_count));
  Trainer trainer(std::move(net), hp);
  Rng rng(derive_seed(seed, "train"));
  for (int e = 0; e < hp.epochs; ++e) {
    if (hp.lr_decay_every > 0 && e > 0 && e % hp.lr_decay_every == 0)
      trainer.set_learning_rate(trainer.learning_rate() * hp.lr_decay);
    const EpochStats stats = trainer.epoch(data, rng);
    if (report) report->epochs.push_back(stats);
    if (on_epoch) on_epoch(e, stats);
  }
  return trainer.release();
}

inline void check_feature(const Network& net, FeatureId f) {
  if (f.layer < 0 || static_cast<std::size_t>(f.layer) >= net.layers.size())
    throw std::invalid_argument("feature " + to_string(f) + ": layer index out of range");
  const Layer& l = net.layers[static_cast<std::size_t>(f.layer)];
  if (!l.parametric()) throw std::invalid_argument("feature " + to_string(f) + ": layer is not conv or fc");
  if (f.filter < 0 || f.filter >= l.units())
    throw std::invalid_argument("feature " + to_string(f) + ": filter index out of range (layer has " +
                                std::to_string(l.units()) + ")");
}

/// Copy of `net` whose listed filters/units have zero weights and bias, i.e. always output zero.
inline Network zero_filters(const Network& net, std::span<const FeatureId> features) {
  for (FeatureId f : features) check_feature(net, f);
  Network out = net;
  for (FeatureId f : features) {
    Layer& l = out.layers[static_cast<std::size_t>(f.layer)];
    const std::size_t per = l.weights.shape().image_size();
    auto w = l.weights.values().subspan(static_cast<std::size_t>(f.filter) * per, per);
    std::fill(w.begin(), w.end(), 0.0f);
    l.bias[static_cast<std::size_t>(f.filter)] = 0.0f;
  }
  return out;
}

// ---- model file --------------------------------------------------------------------------------

inline constexpr std::string_view kModelMagic = "LLNET1\n";
inline constexpr std::string_view kBlobMarker{"\0BLOB\0", 6};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& out, float f) {
  const auto v = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class BlobReader {
 public:
  BlobReader(std::string_view bytes, std::size_t offset) : bytes_(bytes), pos_(offset) {}

  std::uint64_t u64() {
    need(8, "length prefix");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  void floats(std::span<float> out, const std::string& what) {
    const std::size_t start = pos_;
    const std::uint64_t count = u64();
    if (count != out.size())
      throw DataError("model file: " + what + " at offset " + std::to_string(start) + " declares " +
                      std::to_string(count) + " floats, expected " + std::to_string(out.size()));
    need(out.size() * 4, what);
    for (float& f : out) {
      std::uint32_t v = 0;
      for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
      f = std::bit_cast<float>(v);
      pos_ += 4;
    }
  }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n, const std::string& what) {
    if (pos_ + n > bytes_.size())
      throw DataError("model file truncated: " + what + " at offset " + std::to_string(pos_) + " needs " +
                      std::to_string(n) + " bytes, only " + std::to_string(bytes_.size() - pos_) +
                      " remain (expected length >= " + std::to_string(pos_ + n) + ", actual " +
                      std::to_string(bytes_.size()) + ")");
  }
  std::string_view bytes_;
  std::size_t pos_;
};

inline int header_int(const std::string& token, std::string_view key, std::size_t line_offset) {
  const std::string prefix = std::string(key) + "=";
  if (token.rfind(prefix, 0) != 0)
    throw DataError("model file: expected '" + prefix + "...' at offset " + std::to_string(line_offset) + ", got '" +
                    token + "'");
  try {
    std::size_t used = 0;
    const int v = std::stoi(token.substr(prefix.size()), &used);
    if (used != token.size() - prefix.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw DataError("model file: bad integer in '" + token + "' at offset " + std::to_string(line_offset));
  }
}

}  // namespace detail

inline std::string serialize_model(const Network& net) {
  validate(net);
  std::ostringstream h;
  h << kModelMagic;
  h << "input_side=" << net.input_side << " input_channels=" << net.input_channels << " classes=" << net.class_count
    << " tail=" << net.classifier_tail_len << "\n";
  for (const Layer& l : net.layers) {
    h << to_string(l.kind);
    switch (l.kind) {
      case LayerKind::conv:
        h << " kernel=" << l.conv.kernel << " stride=" << l.conv.stride << " pad=" << l.conv.pad
          << " in=" << l.conv.in_channels << " out=" << l.conv.out_channels;
        break;
      case LayerKind::maxpool: h << " window=" << l.window << " stride=" << l.stride; break;
      case LayerKind::fc: h << " in=" << l.fc_in << " out=" << l.fc_out; break;
      default: break;
    }
    h << "\n";
  }
  std::string out = h.str();
  out.append(kBlobMarker);
  for (const Layer& l : net.layers) {
    if (!l.parametric()) continue;
    detail::put_u64(out, l.weights.size());
    for (float f : l.weights.values()) detail::put_f32(out, f);
    detail::put_u64(out, l.bias.size());
    for (float f : l.bias) detail::put_f32(out, f);
  }
  return out;
}

inline Network deserialize_model(std::string_view bytes) {
  if (bytes.substr(0, kModelMagic.size()) != kModelMagic)
    throw DataError("model file: bad magic at offset 0 (expected \"LLNET1\\n\")");
  const std::size_t marker = bytes.find(kBlobMarker, kModelMagic.size());
  if (marker == std::string_view::npos)
    throw DataError("model file: blob marker not found after header (file length " + std::to_string(bytes.size()) + ")");
  Network net;
  std::istringstream header{std::string(bytes.substr(kModelMagic.size(), marker - kModelMagic.size()))};
  std::string line;
  std::size_t offset = kModelMagic.size();
  bool first = true;
  while (std::getline(header, line)) {
    std::istringstream tokens(line);
    std::vector<std::string> tok{std::istream_iterator<std::string>(tokens), std::istream_iterator<std::string>()};
    auto arg = [&](std::size_t i, std::string_view key) {
      if (i >= tok.size())
        throw DataError("model file: missing '" + std::string(key) + "' at offset " + std::to_string(offset));
      return detail::header_int(tok[i], key, offset);
    };
    if (tok.empty()) throw DataError("model file: empty header line at offset " + std::to_string(offset));
    if (first) {
      net.input_side = arg(0, "input_side");
      net.input_channels = arg(1, "input_channels");
      net.class_count = arg(2, "classes");
      net.classifier_tail_len = arg(3, "tail");
      first = false;
    } else if (tok[0] == "conv") {
      net.layers.push_back(Layer::make_conv(arg(4, "in"), arg(5, "out"), arg(1, "kernel"), arg(2, "stride"), arg(3, "pad")));
    } else if (tok[0] == "maxpool") {
      net.layers.push_back(Layer::make_pool(arg(1, "window"), arg(2, "stride")));
    } else if (tok[0] == "fc") {
      net.layers.push_back(Layer::make_fc(arg(1, "in"), arg(2, "out")));
    } else if (tok[0] == "relu") {
      net.layers.push_back(Layer::make(LayerKind::relu));
    } else if (tok[0] == "flatten") {
      net.layers.push_back(Layer::make(LayerKind::flatten));
    } else if (tok[0] == "softmax") {
      net.layers.push_back(Layer::make(LayerKind::softmax));
    } else {
      throw DataError("model file: unknown layer kind '" + tok[0] + "' at offset " + std::to_string(offset));
    }
    offset += line.size() + 1;
  }
  if (first) throw DataError("model file: missing network header line at offset " + std::to_string(kModelMagic.size()));
  try {
    validate(net);
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("model file: invalid architecture: ") + e.what());
  }
  detail::BlobReader reader(bytes, marker + kBlobMarker.size());
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    Layer& l = net.layers[i];
    if (!l.parametric()) continue;
    reader.floats(l.weights.values(), "weights of layer " + std::to_string(i));
    reader.floats(l.bias, "bias of layer " + std::to_string(i));
  }
  if (reader.position() != bytes.size())
    throw DataError("model file: " + std::to_string(bytes.size() - reader.position()) + " trailing bytes at offset " +
                    std::to_string(reader.position()));
  return net;
}

inline void save_model(const Network& net, const std::filesystem::path& path) { write_file(path, serialize_model(net)); }
inline Network load_model(const std::filesystem::path& path) { return deserialize_model(read_file(path)); }

}  // namespace relfeat
