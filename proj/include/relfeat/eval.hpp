#pragma once

#include <Eigen/Core>
#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "relfeat/common.hpp"
#include "relfeat/dataset.hpp"
#include "relfeat/deconv.hpp"
#include "relfeat/descriptor.hpp"
#include "relfeat/explain.hpp"
#include "relfeat/flowergen.hpp"
#include "relfeat/network.hpp"
#include "relfeat/selector.hpp"

namespace relfeat {

// ---- summary statistics ----------------------------------------------------------------------

inline double mean_of(std::span<const double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Sample standard deviation (n - 1); zero for fewer than two values.
inline double stddev_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

struct PairedTest {
  double mean_difference = 0.0;
  double t = 0.0;
  double p_value = 1.0;  // one-sided, H1: mean(a - b) > 0
  std::size_t n = 0;
};

inline PairedTest paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_t_test: length mismatch");
  if (a.size() < 2) throw std::invalid_argument("paired_t_test: need at least two pairs");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  PairedTest r;
  r.n = d.size();
  r.mean_difference = mean_of(d);
  const double sd = stddev_of(d);
  if (sd == 0.0) {
    r.t = r.mean_difference > 0 ? std::numeric_limits<double>::infinity() : 0.0;
    r.p_value = r.mean_difference > 0 ? 0.0 : 1.0;
    return r;
  }
  r.t = r.mean_difference / (sd / std::sqrt(static_cast<double>(r.n)));
  const boost::math::students_t dist(static_cast<double>(r.n - 1));
  r.p_value = boost::math::cdf(boost::math::complement(dist, r.t));
  return r;
}

// ---- ablation --------------------------------------------------------------------------------

enum class AblationCondition { all, only_conv, random, original };

inline std::string_view to_string(AblationCondition c) {
  switch (c) {
    case AblationCondition::all: return "All";
    case AblationCondition::only_conv: return "OnlyConv";
    case AblationCondition::random: return "Random";
    case AblationCondition::original: return "Original";
  }
  return "?";
}

struct AblationCurve {
  AblationCondition condition = AblationCondition::all;
  std::vector<std::size_t> schedule;
  std::vector<double> accuracy;  // mean over seeds for Random
  std::vector<double> stddev;    // across seeds (Random), else zero
};

/// Union of the nonzero features of W, strongest first: by max |w| over classes, ties by (layer, filter).
inline std::vector<FeatureId> relevance_order(const RelevanceMatrix& W, const DescriptorLayout& layout) {
  std::vector<double> best(W.m, 0.0);
  for (const auto& col : W.columns)
    for (const auto& [i, w] : col) best[i] = std::max(best[i], std::abs(w));
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < W.m; ++i)
    if (best[i] > 0.0) idx.push_back(i);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (best[a] != best[b]) return best[a] > best[b];
    return feature_of_index(layout, a) < feature_of_index(layout, b);
  });
  std::vector<FeatureId> out;
  for (std::size_t i : idx) out.push_back(feature_of_index(layout, i));
  return out;
}

inline std::vector<FeatureId> conv_features(const Network& net, std::span<const FeatureId> features) {
  std::vector<FeatureId> out;
  for (FeatureId f : features)
    if (net.layers[static_cast<std::size_t>(f.layer)].kind == LayerKind::conv) out.push_back(f);
  return out;
}

/// Every feature of the descriptor layers, in layout order.
inline std::vector<FeatureId> layout_features(const DescriptorLayout& layout) {
  std::vector<FeatureId> out;
  for (std::size_t i = 0; i < layout.m; ++i) out.push_back(feature_of_index(layout, i));
  return out;
}

inline void check_schedule(std::span<const std::size_t> schedule, std::size_t pool) {
  for (std::size_t k = 0; k < schedule.size(); ++k) {
    if (k > 0 && schedule[k] < schedule[k - 1]) throw ConfigError("ablation: schedule must be non-decreasing");
    if (schedule[k] > pool)
      throw ConfigError("ablation: count " + std::to_string(schedule[k]) + " exceeds pool size " + std::to_string(pool));
  }
}

/// Zeroes the first n features (in the given order) for each n of the schedule and records test accuracy.
inline AblationCurve ablation_curve(const Network& net, std::span<const FeatureId> features, const LabeledDataset& test,
                                    std::span<const std::size_t> schedule, AblationCondition condition,
                                    unsigned threads = 1) {
  check_schedule(schedule, features.size());
  AblationCurve c;
  c.condition = condition;
  c.schedule.assign(schedule.begin(), schedule.end());
  for (std::size_t n : schedule) {
    c.accuracy.push_back(accuracy(zero_filters(net, features.first(n)), test, threads));
    c.stddev.push_back(0.0);
  }
  return c;
}

/// Random condition: n features drawn uniformly without replacement from `pool`, averaged over seeds.
inline AblationCurve random_ablation_curve(const Network& net, std::span<const FeatureId> pool,
                                           const LabeledDataset& test, std::span<const std::size_t> schedule,
                                           int seeds, std::uint64_t seed, unsigned threads = 1) {
  if (seeds < 1) throw ConfigError("ablation: at least one random seed required");
  check_schedule(schedule, pool.size());
  std::vector<std::vector<double>> acc(schedule.size());
  for (int s = 0; s < seeds; ++s) {
    std::vector<FeatureId> order(pool.begin(), pool.end());
    Rng rng(derive_seed(seed, "random-ablation", static_cast<std::uint64_t>(s)));
    rng.shuffle(order);
    for (std::size_t k = 0; k < schedule.size(); ++k)
      acc[k].push_back(accuracy(zero_filters(net, std::span<const FeatureId>(order).first(schedule[k])), test, threads));
  }
  AblationCurve c;
  c.condition = AblationCondition::random;
  c.schedule.assign(schedule.begin(), schedule.end());
  for (const auto& a : acc) {
    c.accuracy.push_back(mean_of(a));
    c.stddev.push_back(stddev_of(a));
  }
  return c;
}

inline AblationCurve original_curve(const Network& net, const LabeledDataset& test, std::span<const std::size_t> schedule,
                                    unsigned threads = 1) {
  const double a = accuracy(net, test, threads);
  AblationCurve c;
  c.condition = AblationCondition::original;
  c.schedule.assign(schedule.begin(), schedule.end());
  c.accuracy.assign(schedule.size(), a);
  c.stddev.assign(schedule.size(), 0.0);
  return c;
}

/// 0, step, 2 step, ..., n (n always included).
inline std::vector<std::size_t> linear_schedule(std::size_t n, std::size_t steps) {
  std::vector<std::size_t> s;
  steps = std::max<std::size_t>(steps, 1);
  for (std::size_t k = 0; k <= steps; ++k) s.push_back(n * k / steps);
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

inline void write_ablation_tsv(std::ostream& out, std::span<const AblationCurve> curves) {
  out << "condition\tcount\tmca\tstd\n";
  for (const auto& c : curves)
    for (std::size_t k = 0; k < c.schedule.size(); ++k)
      out << to_string(c.condition) << '\t' << c.schedule[k] << '\t' << format_double(c.accuracy[k]) << '\t'
          << format_double(c.stddev[k]) << '\n';
}

// ---- IoU ------------------------------------------------------------------------------------

/// tau = step, 2 step, ..., up to 1 - step (inclusive), built from integer multiples.
inline std::vector<double> threshold_grid(double step = 0.05) {
  if (!(step > 0.0 && step < 0.5)) throw ConfigError("threshold step must lie in (0, 0.5)");
  const auto n = static_cast<int>(std::lround(1.0 / step));
  std::vector<double> t;
  for (int k = 1; k < n; ++k) t.push_back(k * step);
  return t;
}

/// IoU of two binary sets given as bool vectors. Two empty sets give 0.
inline double iou_sets(const std::vector<bool>& a, const std::vector<bool>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("iou: size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    uni += a[i] || b[i];
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double heatmap_iou(const Tensor& heat, const Tensor& mask, double tau) {
  if (heat.size() != mask.size()) throw std::invalid_argument("iou: heatmap and mask sizes differ");
  std::vector<bool> a(heat.size()), b(mask.size());
  for (std::size_t i = 0; i < heat.size(); ++i) {
    a[i] = heat[i] >= tau;
    b[i] = mask[i] > 0.5f;
  }
  return iou_sets(a, b);
}

/// Trapezoidal area under (tau, value), normalised by the tau range, in percent.
inline double curve_auc_percent(std::span<const double> taus, std::span<const double> values) {
  if (taus.size() != values.size() || taus.size() < 2) throw std::invalid_argument("auc: need >= 2 matching points");
  double a = 0.0;
  for (std::size_t k = 1; k < taus.size(); ++k) a += 0.5 * (values[k] + values[k - 1]) * (taus[k] - taus[k - 1]);
  return 100.0 * a / (taus.back() - taus.front());
}

struct IoUResult {
  int fold = -1;
  std::vector<double> thresholds;
  std::vector<double> mean_iou;
  double auc = 0.0;
  std::size_t samples = 0;
  std::size_t excluded = 0;  // empty masks
};

inline IoUResult iou_curve(std::span<const Tensor> heatmaps, std::span<const Tensor> masks,
                           std::span<const double> thresholds) {
  if (heatmaps.size() != masks.size()) throw std::invalid_argument("iou: heatmap/mask count mismatch");
  IoUResult r;
  r.thresholds.assign(thresholds.begin(), thresholds.end());
  r.mean_iou.assign(thresholds.size(), 0.0);
  for (std::size_t i = 0; i < heatmaps.size(); ++i) {
    if (mask_count(masks[i]) == 0) {
      ++r.excluded;
      continue;
    }
    for (std::size_t k = 0; k < thresholds.size(); ++k) r.mean_iou[k] += heatmap_iou(heatmaps[i], masks[i], thresholds[k]);
    ++r.samples;
  }
  if (r.samples > 0)
    for (double& v : r.mean_iou) v /= static_cast<double>(r.samples);
  r.auc = curve_auc_percent(r.thresholds, r.mean_iou);
  return r;
}

/// Per-image explanation heatmap: pixelwise max of the top-k feature heatmaps of the predicted class.
/// The upsampled baseline draws its top-k from conv features only.
inline Tensor explanation_heatmap(const Network& net, const RelevanceMatrix& W, const DescriptorLayout& layout,
                                  const Tensor& image, HeatmapMode mode, std::size_t k) {
  ExplainOptions opt;
  opt.k = k;
  opt.mode = mode;
  opt.conv_only = mode == HeatmapMode::upsampled_activation;
  const auto e = explain_image(net, W, layout, image, opt);
  return combined_heatmap(e, image.shape().h, image.shape().w);
}

inline IoUResult iou_auc(const Network& net, const RelevanceMatrix& W, const DescriptorLayout& layout,
                         const LabeledDataset& test, HeatmapMode mode, std::span<const double> thresholds,
                         std::size_t k = 3, unsigned threads = 1, int fold = -1) {
  if (!test.has_masks()) throw DataError("iou: every sample needs a mask");
  std::vector<Tensor> maps(test.size());
  parallel_for(test.size(), threads,
               [&](std::size_t i) { maps[i] = explanation_heatmap(net, W, layout, test.images[i], mode, k); });
  IoUResult r = iou_curve(maps, test.masks, thresholds);
  r.fold = fold;
  return r;
}

inline void write_iou_tsv(std::ostream& out, std::string_view mode, std::span<const IoUResult> folds) {
  out << "mode\tfold\tauc\tsamples\texcluded\n";
  std::vector<double> aucs;
  for (const auto& r : folds) {
    out << mode << '\t' << r.fold << '\t' << format_double(r.auc) << '\t' << r.samples << '\t' << r.excluded << '\n';
    aucs.push_back(r.auc);
  }
  out << mode << "\tmean\t" << format_double(mean_of(aucs)) << "\t\t\n";
  out << mode << "\tstd\t" << format_double(stddev_of(aucs)) << "\t\t\n";
}

inline void write_iou_curve_csv(std::ostream& out, std::string_view mode, std::span<const IoUResult> folds) {
  out << "mode,fold,tau,mean_iou\n";
  for (const auto& r : folds)
    for (std::size_t k = 0; k < r.thresholds.size(); ++k)
      out << mode << ',' << r.fold << ',' << format_double(r.thresholds[k]) << ',' << format_double(r.mean_iou[k])
          << '\n';
}

// ---- occlusion ------------------------------------------------------------------------------

struct OcclusionOptions {
  int patch = 0;  // 0 = ceil(side / 8)
  double max_coverage = 0.30;
  float fill = 0.5f;
  bool stochastic = false;  // sample placements proportionally to heatmap mass
  std::uint64_t seed = 0;
};

struct OcclusionCurve {
  int predicted = 0;
  double base_confidence = 0.0;
  std::vector<double> coverage;    // after each patch
  std::vector<double> confidence;  // of the original predicted class, after each patch
  std::vector<std::pair<int, int>> patches;

  double final_drop() const { return confidence.empty() ? 0.0 : base_confidence - confidence.back(); }
};

inline int occlusion_patch_side(std::size_t image_side, int requested) {
  return requested > 0 ? requested : static_cast<int>((image_side + 7) / 8);
}

namespace detail {

/// Patch-window sums of a 1 x 1 x S x S map for every top-left corner.
inline std::vector<double> window_mass(const Tensor& h, int p) {
  const auto s = static_cast<int>(h.shape().h);
  const int n = s - p + 1;
  std::vector<double> integral(static_cast<std::size_t>((s + 1) * (s + 1)), 0.0);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      integral[static_cast<std::size_t>((y + 1) * (s + 1) + x + 1)] =
          h.at(0, 0, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) +
          integral[static_cast<std::size_t>(y * (s + 1) + x + 1)] + integral[static_cast<std::size_t>((y + 1) * (s + 1) + x)] -
          integral[static_cast<std::size_t>(y * (s + 1) + x)];
  std::vector<double> m(static_cast<std::size_t>(n * n));
  auto I = [&](int y, int x) { return integral[static_cast<std::size_t>(y * (s + 1) + x)]; };
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) m[static_cast<std::size_t>(y * n + x)] = I(y + p, x + p) - I(y, x + p) - I(y + p, x) + I(y, x);
  return m;
}

inline Tensor occlude(const Tensor& image, int y0, int x0, int p, float fill) {
  Tensor out = image;
  for (std::size_t c = 0; c < image.shape().c; ++c)
    for (int y = y0; y < y0 + p; ++y)
      for (int x = x0; x < x0 + p; ++x) out.at(0, c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = fill;
  return out;
}

inline OcclusionCurve run_occlusion(const Network& net, const Tensor& image, int p, const OcclusionOptions& opt,
                                    const std::function<std::pair<int, int>(const std::vector<char>&)>& next) {
  const auto side = static_cast<int>(image.shape().h);
  const int n = side - p + 1;
  const auto base = forward(net, image, false);
  OcclusionCurve c;
  c.predicted = base.predicted;
  c.base_confidence = base.probabilities[static_cast<std::size_t>(base.predicted)];
  std::vector<char> blocked(static_cast<std::size_t>(n * n), 0);
  Tensor current = image;
  std::size_t covered = 0;
  const double total = static_cast<double>(side) * side;
  while (static_cast<double>(covered) / total < opt.max_coverage) {
    const auto [y0, x0] = next(blocked);
    if (y0 < 0) break;
    current = occlude(current, y0, x0, p, opt.fill);
    covered += static_cast<std::size_t>(p * p);
    c.patches.push_back({y0, x0});
    for (int y = std::max(0, y0 - p + 1); y <= std::min(n - 1, y0 + p - 1); ++y)
      for (int x = std::max(0, x0 - p + 1); x <= std::min(n - 1, x0 + p - 1); ++x) blocked[static_cast<std::size_t>(y * n + x)] = 1;
    c.coverage.push_back(static_cast<double>(covered) / total);
    c.confidence.push_back(forward(net, current, false).probabilities[static_cast<std::size_t>(c.predicted)]);
  }
  return c;
}

}  // namespace detail

/// Greedy heatmap-guided occlusion: non-overlapping patches at the highest remaining window mass
/// (ties row-major), filled with mid-gray, until the covered fraction reaches max_coverage.
inline OcclusionCurve occlusion_study(const Network& net, const Tensor& heatmap, const Tensor& image,
                                      const OcclusionOptions& opt = {}) {
  const std::size_t side = image.shape().h;
  if (heatmap.shape().h != side || heatmap.shape().w != image.shape().w)
    throw std::invalid_argument("occlusion: heatmap does not match the image");
  const int p = occlusion_patch_side(side, opt.patch);
  if (p < 1 || static_cast<std::size_t>(p) > side) throw ConfigError("occlusion: patch larger than the image");
  const auto mass = detail::window_mass(heatmap, p);
  Rng rng(derive_seed(opt.seed, "occlusion-sampling"));
  return detail::run_occlusion(net, image, p, opt, [&](const std::vector<char>& blocked) -> std::pair<int, int> {
    const int n = static_cast<int>(side) - p + 1;
    if (opt.stochastic) {
      double total = 0.0;
      for (std::size_t i = 0; i < mass.size(); ++i)
        if (!blocked[i]) total += std::max(mass[i], 0.0);
      if (total <= 0.0) return {-1, -1};
      double u = rng.uniform() * total;
      for (std::size_t i = 0; i < mass.size(); ++i) {
        if (blocked[i]) continue;
        u -= std::max(mass[i], 0.0);
        if (u <= 0.0) return {static_cast<int>(i) / n, static_cast<int>(i) % n};
      }
    }
    std::ptrdiff_t best = -1;
    for (std::size_t i = 0; i < mass.size(); ++i)
      if (!blocked[i] && (best < 0 || mass[i] > mass[static_cast<std::size_t>(best)])) best = static_cast<std::ptrdiff_t>(i);
    if (best < 0) return {-1, -1};
    return {static_cast<int>(best) / n, static_cast<int>(best) % n};
  });
}

/// Baseline: non-overlapping patches at uniformly random positions.
inline OcclusionCurve random_occlusion(const Network& net, const Tensor& image, std::uint64_t seed,
                                       const OcclusionOptions& opt = {}) {
  const std::size_t side = image.shape().h;
  const int p = occlusion_patch_side(side, opt.patch);
  if (p < 1 || static_cast<std::size_t>(p) > side) throw ConfigError("occlusion: patch larger than the image");
  const int n = static_cast<int>(side) - p + 1;
  std::vector<std::size_t> order(static_cast<std::size_t>(n * n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "occlusion-random"));
  rng.shuffle(order);
  std::size_t cursor = 0;
  return detail::run_occlusion(net, image, p, opt, [&](const std::vector<char>& blocked) -> std::pair<int, int> {
    while (cursor < order.size() && blocked[order[cursor]]) ++cursor;
    if (cursor == order.size()) return {-1, -1};
    const auto i = static_cast<int>(order[cursor++]);
    return {i / n, i % n};
  });
}

// ---- sanity check ---------------------------------------------------------------------------

/// 1 - Pearson correlation over the pixels where `region` is set (all pixels when empty).
/// A constant map correlates 0 with anything, except an identical map.
inline double dissimilarity(const Tensor& a, const Tensor& b, const std::vector<bool>& region = {}) {
  if (a.size() != b.size()) throw std::invalid_argument("dissimilarity: size mismatch");
  double sa = 0, sb = 0, n = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (region.empty() || region[i]) sa += a[i], sb += b[i], n += 1;
  if (n == 0) throw std::invalid_argument("dissimilarity: empty region");
  const double ma = sa / n, mb = sb / n;
  double cov = 0, va = 0, vb = 0;
  bool same = true;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!region.empty() && !region[i]) continue;
    const double da = a[i] - ma, db = b[i] - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
    same &= a[i] == b[i];
  }
  if (same) return 0.0;
  if (va == 0.0 || vb == 0.0) return 1.0;
  return 1.0 - cov / std::sqrt(va * vb);
}

struct SanityResult {
  std::vector<int> classes;
  std::vector<Tensor> heatmaps;  // explanation heatmap forcing w_j, per class
  std::vector<bool> present;     // false when w_j is empty
  Eigen::MatrixXd dissimilarity; // NaN where a heatmap is absent
  int predicted = 0;
};

inline SanityResult sanity_check(const Network& net, const RelevanceMatrix& W, const DescriptorLayout& layout,
                                 const Tensor& image, std::span<const int> classes, std::size_t k = 3,
                                 HeatmapMode mode = HeatmapMode::ours) {
  const auto trace = forward(net, image, true);
  if (std::find(classes.begin(), classes.end(), trace.predicted) == classes.end())
    throw ConfigError("sanity_check: class set must include the predicted class " + std::to_string(trace.predicted));
  SanityResult r;
  r.predicted = trace.predicted;
  r.classes.assign(classes.begin(), classes.end());
  ExplainOptions opt;
  opt.k = k;
  opt.mode = mode;
  for (int j : classes) {
    const auto e = explain_class(net, W, layout, trace, j, opt);
    r.present.push_back(!e.features.empty());
    r.heatmaps.push_back(combined_heatmap(e, image.shape().h, image.shape().w));
  }
  const auto c = static_cast<Eigen::Index>(classes.size());
  r.dissimilarity.setConstant(c, c, std::numeric_limits<double>::quiet_NaN());
  for (Eigen::Index a = 0; a < c; ++a)
    for (Eigen::Index b = 0; b < c; ++b)
      if (r.present[static_cast<std::size_t>(a)] && r.present[static_cast<std::size_t>(b)])
        r.dissimilarity(a, b) = dissimilarity(r.heatmaps[static_cast<std::size_t>(a)], r.heatmaps[static_cast<std::size_t>(b)]);
  return r;
}

/// Offset (dy, dx) such that pixel p of the rotated crop `a` shows the same raw point as pixel p + offset
/// of the rotated crop `b`; both crops share one frame and one rotation angle.
inline std::pair<double, double> crop_pair_offset(int raw, int crop_side, const SampleInfo& a, const SampleInfo& b) {
  if (a.frame != b.frame || a.angle != b.angle) throw std::invalid_argument("crop pair must share frame and angle");
  const auto [ay, ax] = crop_origin(raw, crop_side, a.substituted ? 4 : a.crop);
  const auto [by, bx] = crop_origin(raw, crop_side, b.substituted ? 4 : b.crop);
  const double rad = a.angle * 3.14159265358979323846 / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double dy = ay - by, dx = ax - bx;
  return {cs * dy + sn * dx, -sn * dy + cs * dx};
}

/// Translates `b` by the offset (nearest sampling) and returns it with the overlap region.
inline std::pair<Tensor, std::vector<bool>> align_to(const Tensor& b, std::pair<double, double> offset) {
  const auto s = static_cast<long>(b.shape().h);
  Tensor out(b.shape());
  std::vector<bool> region(b.size(), false);
  for (long y = 0; y < s; ++y)
    for (long x = 0; x < s; ++x) {
      const long sy = std::lround(static_cast<double>(y) + offset.first);
      const long sx = std::lround(static_cast<double>(x) + offset.second);
      if (sy < 0 || sx < 0 || sy >= s || sx >= s) continue;
      out.at(0, 0, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
          b.at(0, 0, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
      region[static_cast<std::size_t>(y * s + x)] = true;
    }
  return {out, region};
}

struct SanityPairStats {
  double same_class = 0.0;   // d(H_pred(a), aligned H_pred(b))
  double cross_class = 0.0;  // mean over other classes of d(H_pred(a), H_j(a)), same region
  std::size_t other_classes = 0;
};

inline SanityPairStats sanity_pair(const Network& net, const RelevanceMatrix& W, const DescriptorLayout& layout,
                                   const Tensor& a, const Tensor& b, std::pair<double, double> offset, std::size_t k = 3) {
  std::vector<int> all(static_cast<std::size_t>(net.class_count));
  std::iota(all.begin(), all.end(), 0);
  const auto ra = sanity_check(net, W, layout, a, all, k);
  ExplainOptions opt;
  opt.k = k;
  const auto tb = forward(net, b, true);
  const Tensor hb = combined_heatmap(explain_class(net, W, layout, tb, ra.predicted, opt), b.shape().h, b.shape().w);
  const auto [aligned, region] = align_to(hb, offset);
  const Tensor& ha = ra.heatmaps[static_cast<std::size_t>(ra.predicted)];
  SanityPairStats s;
  s.same_class = dissimilarity(ha, aligned, region);
  double sum = 0.0;
  for (int j : all) {
    if (j == ra.predicted || !ra.present[static_cast<std::size_t>(j)]) continue;
    sum += dissimilarity(ha, ra.heatmaps[static_cast<std::size_t>(j)], region);
    ++s.other_classes;
  }
  s.cross_class = s.other_classes ? sum / static_cast<double>(s.other_classes) : std::numeric_limits<double>::quiet_NaN();
  return s;
}

// ---- reconstruction -------------------------------------------------------------------------

/// ROC-AUC via the Mann-Whitney statistic with average ranks for ties. NaN when a class is absent.
inline double roc_auc(std::span<const double> scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw std::invalid_argument("roc_auc: length mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  double pos = 0, sum = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (positive[i]) pos += 1, sum += rank[i];
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0 || neg == 0) return std::numeric_limits<double>::quiet_NaN();
  return (sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

struct ReconstructionResult {
  std::vector<double> per_class;  // NaN for skipped classes
  std::vector<int> skipped;
  double mean_auc = 0.0;
};

inline ReconstructionResult reconstruction_auc(const DatasetMatrices& mats, const RelevanceMatrix& W) {
  if (W.m != mats.m()) throw DataError("reconstruction: W has m = " + std::to_string(W.m) + ", matrices " + std::to_string(mats.m()));
  ReconstructionResult r;
  std::vector<double> used;
  for (std::size_t j = 0; j < W.classes; ++j) {
    const auto w = W.dense_column(j);
    const Eigen::VectorXd scores = mats.X.transpose() * Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
    std::vector<bool> pos(mats.n());
    for (std::size_t i = 0; i < mats.n(); ++i) pos[i] = mats.L(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) > 0.5;
    const double auc = roc_auc(std::span<const double>(scores.data(), mats.n()), pos);
    r.per_class.push_back(auc);
    if (std::isnan(auc))
      r.skipped.push_back(static_cast<int>(j));
    else
      used.push_back(auc);
  }
  if (used.empty()) throw DataError("reconstruction: no class has both positives and negatives in the split");
  r.mean_auc = mean_of(used);
  return r;
}

/// File stem encoding the run: <dataset>_<variant>_<mode>_mu<mu>_k<k>_seed<seed>.
inline std::string result_name(std::string_view dataset, std::string_view variant, std::string_view mode, double mu,
                               std::size_t k, std::uint64_t seed) {
  std::ostringstream s;
  s << dataset << '_' << variant << '_' << mode << "_mu" << mu << "_k" << k << "_seed" << seed;
  return s.str();
}

}  // namespace relfeat
