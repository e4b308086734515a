#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "relfeat/common.hpp"
#include "relfeat/dataset.hpp"
#include "relfeat/deconv.hpp"
#include "relfeat/descriptor.hpp"
#include "relfeat/io/png.hpp"
#include "relfeat/network.hpp"
#include "relfeat/selector.hpp"

namespace relfeat {

struct ExplainedFeature {
  FeatureId feature;
  std::size_t index = 0;
  double response = 0.0;  // r = w_j[index] * x[index]
  double weight = 0.0;
  Heatmap heatmap;
};

struct Explanation {
  int predicted_class = 0;
  int explained_class = 0;
  double confidence = 0.0;
  std::size_t k = 0;
  // Set when fewer than k features could be returned (including none).
  bool truncated = false;
  std::vector<ExplainedFeature> features;
};

struct ExplainOptions {
  std::size_t k = 3;
  HeatmapMode mode = HeatmapMode::ours;
  bool render = true;       // compute heatmaps
  bool conv_only = false;   // restrict candidates to conv features
};

/// Ranks the nonzeros of w_j by r = w_j * x (descending; ties by layer, filter) and keeps the top k.
inline Explanation explain_class(const Network& net, const RelevanceMatrix& W, const DescriptorLayout& layout,
                                 const ActivationTrace& trace, int j, const ExplainOptions& opt = {}) {
  if (opt.k < 1) throw ConfigError("explain: k must be >= 1");
  if (W.m != layout.m)
    throw DataError("explain: W has m = " + std::to_string(W.m) + " but the network descriptor has m = " +
                    std::to_string(layout.m));
  if (j < 0 || static_cast<std::size_t>(j) >= W.classes)
    throw std::out_of_range("explain: class " + std::to_string(j) + " not in W");
  const auto x = descriptor_values(trace, net, layout);
  Explanation e;
  e.predicted_class = trace.predicted;
  e.explained_class = j;
  e.confidence = trace.probabilities.at(static_cast<std::size_t>(trace.predicted));
  e.k = opt.k;
  std::vector<ExplainedFeature> cand;
  for (const auto& [i, w] : W.columns[static_cast<std::size_t>(j)]) {
    const FeatureId f = feature_of_index(layout, i);
    if (opt.conv_only && net.layers[static_cast<std::size_t>(f.layer)].kind != LayerKind::conv) continue;
    cand.push_back({f, i, w * x[i], w, {}});
  }
  std::sort(cand.begin(), cand.end(), [](const ExplainedFeature& a, const ExplainedFeature& b) {
    if (a.response != b.response) return a.response > b.response;
    return a.feature < b.feature;
  });
  e.truncated = cand.size() < opt.k;
  cand.resize(std::min(cand.size(), opt.k));
  if (opt.render)
    for (auto& c : cand) c.heatmap = feature_heatmap(net, trace, c.feature, opt.mode);
  e.features = std::move(cand);
  return e;
}

inline Explanation explain_image(const Network& net, const RelevanceMatrix& W, const DescriptorLayout& layout,
                                 const Tensor& image, const ExplainOptions& opt = {}) {
  const auto trace = forward(net, image, true);
  return explain_class(net, W, layout, trace, trace.predicted, opt);
}

/// Pixelwise max of the explanation's feature heatmaps; all-zero when there are none.
inline Tensor combined_heatmap(const Explanation& e, std::size_t height, std::size_t width) {
  Tensor out({1, 1, height, width});
  for (const auto& f : e.features)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], f.heatmap.values[i]);
  return out;
}

/// Bundle: prediction.txt, feature_<rank>_L<p>F<q>.png (+ sidecars), manifest.tsv.
inline void write_explanation(const Explanation& e, const std::vector<std::string>& class_names,
                              const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string label = static_cast<std::size_t>(e.predicted_class) < class_names.size()
                                ? class_names[static_cast<std::size_t>(e.predicted_class)]
                                : std::to_string(e.predicted_class);
  write_file(dir / "prediction.txt",
             std::to_string(e.predicted_class) + "\t" + label + "\t" + format_double(e.confidence) + "\n");
  std::ostringstream m;
  m << "rank\tfeature\tindex\tresponse\tweight\tfile\n";
  for (std::size_t r = 0; r < e.features.size(); ++r) {
    const auto& f = e.features[r];
    const std::string file = "feature_" + std::to_string(r + 1) + "_" + to_string(f.feature) + ".png";
    write_heatmap(f.heatmap, dir / file);
    m << r + 1 << '\t' << to_string(f.feature) << '\t' << f.index << '\t' << format_double(f.response) << '\t'
      << format_double(f.weight) << '\t' << file << '\n';
  }
  if (e.truncated) m << "# fewer than k=" << e.k << " relevant features available\n";
  write_file(dir / "manifest.tsv", m.str());
}

// ---- receptive fields ------------------------------------------------------------------------

/// Inclusive input-space rectangle of one unit, clipped to the image, plus the unclipped nominal square.
struct ReceptiveField {
  long y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // clipped, inclusive
  long nominal_y = 0, nominal_x = 0;    // unclipped top-left
  long side = 0;                        // nominal side
};

inline ReceptiveField receptive_field(const Network& net, std::size_t layer, std::size_t y, std::size_t x) {
  if (layer >= net.layers.size()) throw std::out_of_range("receptive_field: layer out of range");
  const long full = net.input_side;
  long rf = 1, jump = 1, start = 0;
  for (std::size_t l = 0; l <= layer; ++l) {
    const Layer& L = net.layers[l];
    if (L.kind == LayerKind::fc || L.kind == LayerKind::flatten || L.kind == LayerKind::softmax)
      return {0, 0, full - 1, full - 1, 0, 0, full};
    int kernel = 1, stride = 1, pad = 0;
    if (L.kind == LayerKind::conv) {
      kernel = L.conv.kernel;
      stride = L.conv.stride;
      pad = L.conv.pad;
    } else if (L.kind == LayerKind::maxpool) {
      kernel = L.window;
      stride = L.stride;
    }
    rf += (kernel - 1) * jump;
    start -= pad * jump;
    jump *= stride;
  }
  ReceptiveField r;
  r.side = rf;
  r.nominal_y = start + static_cast<long>(y) * jump;
  r.nominal_x = start + static_cast<long>(x) * jump;
  r.y0 = std::max(0L, r.nominal_y);
  r.x0 = std::max(0L, r.nominal_x);
  r.y1 = std::min(full - 1, r.nominal_y + rf - 1);
  r.x1 = std::min(full - 1, r.nominal_x + rf - 1);
  return r;
}

/// Crop of `image` over the nominal receptive field, zero where it leaves the image.
inline Tensor crop_receptive_field(const Tensor& image, const ReceptiveField& rf) {
  const std::size_t c = image.shape().c;
  const auto side = static_cast<std::size_t>(rf.side);
  Tensor out({1, c, side, side});
  for (long y = rf.y0; y <= rf.y1; ++y)
    for (long x = rf.x0; x <= rf.x1; ++x)
      for (std::size_t k = 0; k < c; ++k)
        out.at(0, k, static_cast<std::size_t>(y - rf.nominal_y), static_cast<std::size_t>(x - rf.nominal_x)) =
            image.at(0, k, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
  return out;
}

// ---- average visualisations ------------------------------------------------------------------

struct AverageVisualization {
  FeatureId feature;
  int class_id = 0;
  Tensor mean_patch;  // 1 x C x side x side
  std::size_t count = 0;
  bool short_pool = false;  // fewer than top_n candidate images
  std::vector<std::size_t> images;  // contributing dataset indices, best first
};

struct InterpretOptions {
  std::size_t top_n = 100;
  bool class_restricted = true;
  bool raw_magnitude = false;  // rank by raw channel L2 instead of the descriptor entry
  unsigned threads = 1;
  std::vector<Tensor>* crops = nullptr;  // when set, receives every crop of the first feature
};

/// Row-major first argmax of a feature's response map.
inline std::pair<std::size_t, std::size_t> response_argmax(const Network& net, const ActivationTrace& trace,
                                                           FeatureId f) {
  const Tensor& r = response_tensor(net, trace, static_cast<std::size_t>(f.layer), true);
  const auto plane = r.channel(0, static_cast<std::size_t>(f.filter));
  const std::size_t best = static_cast<std::size_t>(std::max_element(plane.begin(), plane.end()) - plane.begin());
  return {best / r.shape().w, best % r.shape().w};
}

inline std::vector<AverageVisualization> average_visualization(const Network& net, const RelevanceMatrix& W,
                                                               const DescriptorLayout& layout, int j,
                                                               const LabeledDataset& data,
                                                               const InterpretOptions& opt = {}) {
  if (opt.top_n < 1) throw ConfigError("interpret: top_n must be >= 1");
  const auto ranked = relevant_features(W, static_cast<std::size_t>(j), layout);
  std::vector<std::size_t> pool =
      opt.class_restricted ? data.indices_where([&](std::size_t i) { return data.labels[i] == j; })
                           : data.indices_where([](std::size_t) { return true; });
  std::vector<std::vector<double>> desc(pool.size());
  std::vector<std::vector<double>> raw(pool.size());
  parallel_for(pool.size(), opt.threads, [&](std::size_t k) {
    const auto t = forward(net, data.images[pool[k]], true);
    desc[k] = descriptor_values(t, net, layout);
    if (opt.raw_magnitude) {
      raw[k].resize(layout.m);
      for (const auto& seg : layout.segments) {
        const auto n = channel_l2(response_tensor(net, t, static_cast<std::size_t>(seg.layer), true));
        std::copy(n.begin(), n.end(), raw[k].begin() + static_cast<std::ptrdiff_t>(seg.offset));
      }
    }
  });
  std::vector<AverageVisualization> out(ranked.size());
  parallel_for(ranked.size(), opt.threads, [&](std::size_t fi) {
    const auto& rf = ranked[fi];
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    const auto& score = opt.raw_magnitude ? raw : desc;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return score[a][rf.index] > score[b][rf.index]; });
    const std::size_t n = std::min(opt.top_n, order.size());
    AverageVisualization av;
    av.feature = rf.feature;
    av.class_id = j;
    av.short_pool = order.size() < opt.top_n;
    std::vector<double> sum;
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t idx = pool[order[r]];
      const auto t = forward(net, data.images[idx], true);
      const auto [y, x] = response_argmax(net, t, rf.feature);
      const Tensor crop = crop_receptive_field(data.images[idx], receptive_field(net, static_cast<std::size_t>(rf.feature.layer), y, x));
      if (sum.empty()) {
        sum.assign(crop.size(), 0.0);
        av.mean_patch = Tensor(crop.shape());
      }
      for (std::size_t k = 0; k < crop.size(); ++k) sum[k] += crop[k];
      if (opt.crops && fi == 0) opt.crops->push_back(crop);
      av.images.push_back(idx);
    }
    av.count = n;
    for (std::size_t k = 0; k < sum.size(); ++k) av.mean_patch[k] = static_cast<float>(sum[k] / static_cast<double>(n));
    out[fi] = std::move(av);
  });
  return out;
}

}  // namespace relfeat
