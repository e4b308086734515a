#include <gtest/gtest.h>

#include <sstream>

#include "relfeat/eval.hpp"
#include "nets.hpp"
#include "test_util.hpp"

using namespace relfeat;
using namespace relfeat::testing;

namespace {

Tensor square_mask(std::size_t side, std::size_t y0, std::size_t x0, std::size_t len) {
  Tensor m({1, 1, side, side});
  for (std::size_t y = y0; y < y0 + len; ++y)
    for (std::size_t x = x0; x < x0 + len; ++x) m.at(0, 0, y, x) = 1.0f;
  return m;
}

Tensor filled(std::size_t side, float v) {
  Tensor t({1, 1, side, side});
  for (float& x : t.values()) x = v;
  return t;
}

}  // namespace

TEST(Stats, PairedTTestAgainstHandComputation) {
  const std::vector<double> a{5, 7, 6, 9, 8}, b{4, 5, 6, 6, 5};
  // differences 1 2 0 3 3: mean 1.8, sd sqrt(1.7), t = 1.8 / (sqrt(1.7) / sqrt(5))
  const auto r = paired_t_test(a, b);
  EXPECT_NEAR(r.mean_difference, 1.8, 1e-12);
  EXPECT_NEAR(r.t, 1.8 / (std::sqrt(1.7) / std::sqrt(5.0)), 1e-12);
  EXPECT_GT(r.p_value, 0.01);
  EXPECT_LT(r.p_value, 0.05);
  EXPECT_GT(paired_t_test(b, a).p_value, 0.95);
  EXPECT_THROW(paired_t_test(std::vector<double>{1}, std::vector<double>{1}), std::invalid_argument);
}

TEST(Iou, GridIsExactMultiples) {
  const auto t = threshold_grid(0.05);
  ASSERT_EQ(t.size(), 19u);
  EXPECT_DOUBLE_EQ(t.front(), 0.05);
  EXPECT_DOUBLE_EQ(t.back(), 0.95);
  EXPECT_THROW(threshold_grid(0.0), ConfigError);
}

TEST(Iou, HeatmapEqualToMaskGivesHundred) {
  const Tensor m = square_mask(16, 3, 4, 6);
  const std::vector<Tensor> h{m}, masks{m};
  for (double step : {0.05, 0.01}) {
    const auto r = iou_curve(h, masks, threshold_grid(step));
    for (double v : r.mean_iou) EXPECT_DOUBLE_EQ(v, 1.0);
    EXPECT_NEAR(r.auc, 100.0, 1e-9);
  }
}

TEST(Iou, UniformHalfHeatmapHandIntegral) {
  // IoU = a for tau <= 0.5 and 0 after; trapezoid over [0.05, 0.95] on the 0.05 grid.
  const Tensor m = square_mask(20, 0, 0, 10);
  const double a = 100.0 / 400.0;
  const std::vector<Tensor> h{filled(20, 0.5f)}, masks{m};
  const auto r = iou_curve(h, masks, threshold_grid(0.05));
  for (std::size_t k = 0; k < r.thresholds.size(); ++k)
    EXPECT_DOUBLE_EQ(r.mean_iou[k], r.thresholds[k] <= 0.5 + 1e-12 ? a : 0.0);
  const double area = a * (0.5 - 0.05) + 0.5 * a * 0.05;
  EXPECT_NEAR(r.auc, 100.0 * area / 0.9, 1e-9);
}

TEST(Iou, SetIouIsSymmetricAndOneOnlyWhenEqual) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<bool> a(30), b(30);
    for (std::size_t i = 0; i < 30; ++i) a[i] = rng.uniform() < 0.3, b[i] = rng.uniform() < 0.3;
    if (trial % 10 == 0) b = a;
    const double ab = iou_sets(a, b);
    EXPECT_DOUBLE_EQ(ab, iou_sets(b, a));
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
    const bool nonempty = std::find(a.begin(), a.end(), true) != a.end();
    EXPECT_EQ(ab == 1.0, a == b && nonempty);
  }
}

TEST(Iou, FinerGridChangesAucLittle) {
  std::vector<Tensor> h, masks;
  for (std::uint64_t s = 0; s < 8; ++s) {
    h.push_back(random_tensor({1, 1, 24, 24}, 10 + s, 0.0, 1.0));
    masks.push_back(square_mask(24, s, 2 * s, 9));
  }
  const double coarse = iou_curve(h, masks, threshold_grid(0.05)).auc;
  const double fine = iou_curve(h, masks, threshold_grid(0.01)).auc;
  EXPECT_NEAR(coarse, fine, 1.0);
}

TEST(Iou, EmptyMasksExcludedAndCounted) {
  const std::vector<Tensor> h{filled(8, 1.0f), filled(8, 1.0f)}, masks{Tensor({1, 1, 8, 8}), filled(8, 1.0f)};
  const auto r = iou_curve(h, masks, threshold_grid());
  EXPECT_EQ(r.excluded, 1u);
  EXPECT_EQ(r.samples, 1u);
  EXPECT_NEAR(r.auc, 100.0, 1e-9);
}

TEST(Iou, TsvHasFoldAndSummaryRows) {
  IoUResult a, b;
  a.fold = 0, a.auc = 20.0;
  b.fold = 1, b.auc = 24.0;
  std::ostringstream out;
  write_iou_tsv(out, "ours", std::vector<IoUResult>{a, b});
  EXPECT_NE(out.str().find("ours\tmean\t22"), std::string::npos) << out.str();
  EXPECT_NE(out.str().find("ours\tstd\t2.828"), std::string::npos) << out.str();
}

TEST(Iou, ExplanationHeatmapsAreNormalised) {
  const Network net = small_net(3);
  const auto layout = make_layout(net);
  const auto W = dense_w(layout, 3, 5, 0.5);
  auto data = random_images(6, 20);
  for (std::size_t i = 0; i < data.size(); ++i) data.masks.push_back(square_mask(12, i, i, 5));
  for (auto mode : {HeatmapMode::ours, HeatmapMode::deconv_gb_vanilla, HeatmapMode::upsampled_activation}) {
    const auto r = iou_auc(net, W, layout, data, mode, threshold_grid(), 3, 2, 4);
    EXPECT_EQ(r.fold, 4);
    EXPECT_GE(r.auc, 0.0);
    EXPECT_LE(r.auc, 100.0);
    for (double v : r.mean_iou) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
    const auto serial = iou_auc(net, W, layout, data, mode, threshold_grid(), 3, 1, 4);
    EXPECT_EQ(serial.mean_iou, r.mean_iou);
  }
  data.masks.clear();
  EXPECT_THROW(iou_auc(net, W, layout, data, HeatmapMode::ours, threshold_grid()), DataError);
}

TEST(Ablation, RelevanceOrderByMagnitudeThenFeature) {
  const Network net = small_net(1);
  const auto layout = make_layout(net);
  RelevanceMatrix W{layout.m, 2, 1.0, std::vector<std::vector<RelevanceMatrix::Entry>>(2)};
  std::vector<double> c0(layout.m, 0.0), c1(layout.m, 0.0);
  c0[5] = 0.2, c0[1] = -0.7, c1[5] = 0.9, c1[2] = 0.2;
  W.set_column(0, c0);
  W.set_column(1, c1);
  const auto order = relevance_order(W, layout);
  ASSERT_EQ(order.size(), 3u);
  EXPECT_EQ(order[0], feature_of_index(layout, 5));
  EXPECT_EQ(order[1], feature_of_index(layout, 1));
  EXPECT_EQ(order[2], feature_of_index(layout, 2));
}

TEST(Ablation, ZeroCountIsOriginalAndScheduleChecked) {
  const Network net = small_net(2);
  const auto layout = make_layout(net);
  const auto data = random_images(30, 3);
  const auto feats = layout_features(layout);
  const std::vector<std::size_t> sched{0, 4, 4, 10};
  const auto c = ablation_curve(net, feats, data, sched, AblationCondition::all);
  EXPECT_EQ(c.accuracy[0], accuracy(net, data));
  EXPECT_EQ(c.accuracy[1], c.accuracy[2]);
  const auto r = random_ablation_curve(net, feats, data, sched, 5, 1);
  EXPECT_EQ(r.accuracy[0], accuracy(net, data));
  EXPECT_EQ(r.stddev[0], 0.0);
  EXPECT_EQ(original_curve(net, data, sched).accuracy[3], accuracy(net, data));
  EXPECT_THROW(ablation_curve(net, feats, data, std::vector<std::size_t>{3, 1}, AblationCondition::all), ConfigError);
  EXPECT_THROW(ablation_curve(net, std::span(feats).first(2), data, std::vector<std::size_t>{3}, AblationCondition::all),
               ConfigError);
  EXPECT_THROW(random_ablation_curve(net, feats, data, sched, 0, 1), ConfigError);
}

TEST(Ablation, ZeroingEveryFeatureGivesAConstantPredictor) {
  Network net = small_net(5);
  for (float& b : net.layers[8].bias) b = 0.0f;
  net.layers[8].bias[1] = 0.5f;
  const auto layout = make_layout(net);
  const auto data = random_images(30, 8);
  const auto feats = layout_features(layout);
  const auto c = ablation_curve(net, feats, data, std::vector<std::size_t>{feats.size()}, AblationCondition::all);
  EXPECT_DOUBLE_EQ(c.accuracy[0], 10.0 / 30.0);
}

TEST(Ablation, LinearScheduleAndTsv) {
  EXPECT_EQ(linear_schedule(10, 4), (std::vector<std::size_t>{0, 2, 5, 7, 10}));
  EXPECT_EQ(linear_schedule(2, 5), (std::vector<std::size_t>{0, 1, 2}));
  AblationCurve c;
  c.condition = AblationCondition::only_conv;
  c.schedule = {0, 3};
  c.accuracy = {1.0, 0.5};
  c.stddev = {0.0, 0.0};
  std::ostringstream out;
  write_ablation_tsv(out, std::vector<AblationCurve>{c});
  EXPECT_EQ(out.str(), "condition\tcount\tmca\tstd\nOnlyConv\t0\t1\t0\nOnlyConv\t3\t0.5\t0\n");
}

TEST(Occlusion, CoverageStopsAtThirtyPercent) {
  const Network net = small_net(4);
  const Tensor img = random_tensor({1, 3, 12, 12}, 5, 0.0, 1.0);
  const Tensor h = random_tensor({1, 1, 12, 12}, 6, 0.0, 1.0);
  const auto c = occlusion_study(net, h, img);
  ASSERT_FALSE(c.patches.empty());
  const double patch = 4.0 / 144.0;
  EXPECT_GE(c.coverage.back(), 0.30);
  EXPECT_LE(c.coverage.back(), 0.30 + patch + 1e-12);
  for (std::size_t a = 0; a < c.patches.size(); ++a)
    for (std::size_t b = a + 1; b < c.patches.size(); ++b)
      EXPECT_TRUE(std::abs(c.patches[a].first - c.patches[b].first) >= 2 ||
                  std::abs(c.patches[a].second - c.patches[b].second) >= 2);
  EXPECT_EQ(c.base_confidence, forward(net, img).probabilities[static_cast<std::size_t>(c.predicted)]);
}

TEST(Occlusion, GreedyFollowsHeatmapMass) {
  const Network net = small_net(4);
  const Tensor img = random_tensor({1, 3, 12, 12}, 5, 0.0, 1.0);
  Tensor h({1, 1, 12, 12});
  h.at(0, 0, 7, 9) = 1.0f;
  h.at(0, 0, 2, 2) = 0.5f;
  OcclusionOptions opt;
  opt.patch = 3;
  const auto c = occlusion_study(net, h, img, opt);
  EXPECT_EQ(c.patches[0], (std::pair<int, int>{5, 7}));
  EXPECT_EQ(c.patches[1], (std::pair<int, int>{0, 0}));
}

TEST(Occlusion, ZeroPatchesMeanZeroDeltaAndOversizeRejected) {
  const Network net = small_net(4);
  const Tensor img = random_tensor({1, 3, 12, 12}, 5, 0.0, 1.0);
  OcclusionOptions opt;
  opt.max_coverage = 0.0;
  const auto c = occlusion_study(net, filled(12, 1.0f), img, opt);
  EXPECT_TRUE(c.patches.empty());
  EXPECT_EQ(c.final_drop(), 0.0);
  opt.patch = 13;
  EXPECT_THROW(occlusion_study(net, filled(12, 1.0f), img, opt), ConfigError);
  EXPECT_THROW(random_occlusion(net, img, 1, opt), ConfigError);
}

TEST(Occlusion, RandomPlacementIsSeeded) {
  const Network net = small_net(4);
  const Tensor img = random_tensor({1, 3, 12, 12}, 5, 0.0, 1.0);
  EXPECT_EQ(random_occlusion(net, img, 3).patches, random_occlusion(net, img, 3).patches);
  EXPECT_NE(random_occlusion(net, img, 3).patches, random_occlusion(net, img, 4).patches);
}

TEST(Sanity, DissimilarityBasics) {
  const Tensor a = random_tensor({1, 1, 10, 10}, 1, 0.0, 1.0);
  EXPECT_EQ(dissimilarity(a, a), 0.0);
  Tensor neg = a;
  for (float& v : neg.values()) v = 1.0f - v;
  EXPECT_NEAR(dissimilarity(a, neg), 2.0, 1e-6);
  Tensor scaled = a;
  for (float& v : scaled.values()) v = 0.5f * v + 0.1f;
  EXPECT_NEAR(dissimilarity(a, scaled), 0.0, 1e-6);
  EXPECT_EQ(dissimilarity(a, filled(10, 0.3f)), 1.0);
}

TEST(Sanity, SelfDissimilarityZeroAndPermutationConsistent) {
  const Network net = small_net(6);
  const auto layout = make_layout(net);
  const auto W = dense_w(layout, 3, 7, 0.5);
  const Tensor img = random_tensor({1, 3, 12, 12}, 8, 0.0, 1.0);
  const std::vector<int> order{0, 1, 2}, perm{2, 0, 1};
  const auto r = sanity_check(net, W, layout, img, order);
  const auto p = sanity_check(net, W, layout, img, perm);
  for (int a = 0; a < 3; ++a) {
    EXPECT_EQ(r.dissimilarity(a, a), 0.0);
    for (int b = 0; b < 3; ++b) EXPECT_EQ(p.dissimilarity(a, b), r.dissimilarity(perm[a], perm[b]));
  }
  const std::vector<int> without{(r.predicted + 1) % 3};
  EXPECT_THROW(sanity_check(net, W, layout, img, without), ConfigError);
}

TEST(Sanity, EmptyColumnFlaggedAbsent) {
  const Network net = small_net(6);
  const auto layout = make_layout(net);
  auto W = dense_w(layout, 3, 7, 0.5);
  const Tensor img = random_tensor({1, 3, 12, 12}, 8, 0.0, 1.0);
  const int pred = forward(net, img).predicted;
  const int other = (pred + 1) % 3;
  W.set_column(static_cast<std::size_t>(other), std::vector<double>(layout.m, 0.0));
  const auto r = sanity_check(net, W, layout, img, std::vector<int>{0, 1, 2});
  EXPECT_FALSE(r.present[static_cast<std::size_t>(other)]);
  EXPECT_TRUE(std::isnan(r.dissimilarity(other, pred)));
}

TEST(Sanity, CropPairOffsetAlignsRotatedCrops) {
  FlowerSpec spec;
  spec = mini_profile(spec);
  const Frame f = render_frame(spec, 0, 2);
  for (int angle : {5, 15, 25})
    for (int cb : {1, 2, 3}) {
      const SampleInfo a{2, 0, angle, false}, b{2, cb, angle, false};
      auto rotated = [&](const SampleInfo& s) {
        const auto [y0, x0] = crop_origin(spec.raw_side, spec.crop_side, s.crop);
        return rotate(crop(f.mask, y0, x0, spec.crop_side), angle, true);
      };
      const Tensor ma = rotated(a);
      const auto [aligned, region] = align_to(rotated(b), crop_pair_offset(spec.raw_side, spec.crop_side, a, b));
      std::vector<bool> sa(ma.size()), sb(ma.size());
      for (std::size_t i = 0; i < ma.size(); ++i) {
        sa[i] = region[i] && ma[i] > 0.5f;
        sb[i] = region[i] && aligned[i] > 0.5f;
      }
      EXPECT_GT(iou_sets(sa, sb), 0.85) << "angle " << angle << " crop " << cb;
    }
  EXPECT_THROW(crop_pair_offset(77, 64, {1, 0, 5, false}, {2, 1, 5, false}), std::invalid_argument);
}

TEST(Sanity, ZeroOffsetAlignmentIsIdentity) {
  const Tensor h = random_tensor({1, 1, 9, 9}, 2, 0.0, 1.0);
  const auto [aligned, region] = align_to(h, {0.0, 0.0});
  EXPECT_EQ(aligned, h);
  EXPECT_EQ(std::count(region.begin(), region.end(), true), 81);
  const auto [shifted, part] = align_to(h, {2.0, -1.0});
  EXPECT_EQ(shifted.at(0, 0, 0, 1), h.at(0, 0, 2, 0));
  EXPECT_EQ(std::count(part.begin(), part.end(), true), 7 * 8);
}

TEST(Reconstruction, RocAucOracles) {
  std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  EXPECT_DOUBLE_EQ(roc_auc(s, {false, false, true, true}), 0.75);
  EXPECT_DOUBLE_EQ(roc_auc(std::vector<double>{1, 0, 1, 0}, {true, false, true, false}), 1.0);
  EXPECT_DOUBLE_EQ(roc_auc(std::vector<double>{0.5, 0.5}, {true, false}), 0.5);
  EXPECT_TRUE(std::isnan(roc_auc(s, {true, true, true, true})));
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng score_rng(derive_seed(seed, "scores")), label_rng(derive_seed(seed, "labels"));
    std::vector<double> r(1000);
    std::vector<bool> pos(1000);
    for (std::size_t i = 0; i < 1000; ++i) r[i] = score_rng.uniform(), pos[i] = label_rng.uniform() < 0.5;
    const double auc = roc_auc(r, pos);
    EXPECT_NEAR(auc, 0.5, 0.05) << seed;
    double wins = 0, np = 0, nn = 0;
    for (std::size_t i = 0; i < 1000; ++i) {
      (pos[i] ? np : nn) += 1;
      if (!pos[i]) continue;
      for (std::size_t j = 0; j < 1000; ++j)
        if (!pos[j]) wins += r[i] > r[j] ? 1.0 : r[i] == r[j] ? 0.5 : 0.0;
    }
    EXPECT_NEAR(auc, wins / (np * nn), 1e-12);
  }
}

TEST(Reconstruction, ScoresEqualLabelsGiveOneAndAbsentClassSkipped) {
  DatasetMatrices mats;
  mats.X = Eigen::MatrixXd::Zero(3, 6);
  mats.L = Eigen::MatrixXd::Zero(3, 6);
  for (int i = 0; i < 6; ++i) {
    mats.L(i % 2, i) = 1.0;
    mats.X(i % 2, i) = 1.0;
  }
  RelevanceMatrix W{3, 3, 1.0, std::vector<std::vector<RelevanceMatrix::Entry>>(3)};
  W.set_column(0, std::vector<double>{1.0, 0.0, 0.0});
  W.set_column(1, std::vector<double>{0.0, 1.0, 0.0});
  const auto r = reconstruction_auc(mats, W);
  EXPECT_DOUBLE_EQ(r.mean_auc, 1.0);
  EXPECT_EQ(r.skipped, (std::vector<int>{2}));
  RelevanceMatrix bad{4, 3, 1.0, std::vector<std::vector<RelevanceMatrix::Entry>>(3)};
  EXPECT_THROW(reconstruction_auc(mats, bad), DataError);
}

TEST(Naming, ResultNameEncodesTheRun) {
  EXPECT_EQ(result_name("an8flower", "single-6c", "ours", 10, 3, 7), "an8flower_single-6c_ours_mu10_k3_seed7");
}
