#include <gtest/gtest.h>

#include <filesystem>

#include "relfeat/explain.hpp"
#include "nets.hpp"
#include "test_util.hpp"

using namespace relfeat;
using namespace relfeat::testing;

TEST(Explain, ResponsesAreRecomputedProductsSortedDescending) {
  const Network net = small_net(1);
  const auto layout = make_layout(net);
  const auto W = dense_w(layout, 3, 2, 0.6);
  const Tensor img = random_tensor({1, 3, 12, 12}, 3, 0, 1);
  const auto trace = forward(net, img);
  const auto x = descriptor_values(trace, net, layout);
  for (int j = 0; j < 3; ++j) {
    ExplainOptions opt;
    opt.k = 4;
    opt.render = false;
    const auto e = explain_class(net, W, layout, trace, j, opt);
    ASSERT_EQ(e.features.size(), std::min<std::size_t>(4, W.nnz(static_cast<std::size_t>(j))));
    const auto w = W.dense_column(static_cast<std::size_t>(j));
    for (std::size_t r = 0; r < e.features.size(); ++r) {
      const auto& f = e.features[r];
      EXPECT_NE(w[f.index], 0.0);
      EXPECT_EQ(index_of_feature(layout, f.feature), f.index);
      EXPECT_LE(relfeat::testing::rel_err(f.response, w[f.index] * x[f.index]), 1e-6);
      if (r > 0) EXPECT_GE(e.features[r - 1].response, f.response);
    }
    // Nothing outside the selection beats the last selected response.
    for (const auto& [i, wi] : W.columns[static_cast<std::size_t>(j)]) {
      bool chosen = false;
      for (const auto& f : e.features) chosen |= f.index == i;
      if (!chosen) EXPECT_LE(wi * x[i], e.features.back().response);
    }
  }
}

TEST(Explain, PredictedClassAndConfidence) {
  const Network net = small_net(4);
  const auto layout = make_layout(net);
  const auto W = dense_w(layout, 3, 5, 0.5);
  const Tensor img = random_tensor({1, 3, 12, 12}, 6, 0, 1);
  const auto trace = forward(net, img);
  const auto e = explain_image(net, W, layout, img);
  EXPECT_EQ(e.predicted_class, trace.predicted);
  EXPECT_EQ(e.explained_class, trace.predicted);
  EXPECT_FLOAT_EQ(static_cast<float>(e.confidence), trace.probabilities[static_cast<std::size_t>(trace.predicted)]);
  for (const auto& f : e.features) {
    EXPECT_EQ(f.heatmap.mode, HeatmapMode::ours);
    EXPECT_EQ(f.heatmap.source, f.feature);
    EXPECT_EQ(f.heatmap.values.shape(), (Shape{1, 1, 12, 12}));
  }
}

TEST(Explain, EmptyColumnGivesEmptyFlaggedList) {
  const Network net = small_net(7);
  const auto layout = make_layout(net);
  RelevanceMatrix W{layout.m, 3, 1.0, std::vector<std::vector<RelevanceMatrix::Entry>>(3)};
  const auto e = explain_class(net, W, layout, forward(net, random_tensor({1, 3, 12, 12}, 8, 0, 1)), 1);
  EXPECT_TRUE(e.features.empty());
  EXPECT_TRUE(e.truncated);
}

TEST(Explain, SingleNonzeroWithKOne) {
  const Network net = small_net(9);
  const auto layout = make_layout(net);
  RelevanceMatrix W{layout.m, 3, 1.0, std::vector<std::vector<RelevanceMatrix::Entry>>(3)};
  std::vector<double> w(layout.m, 0.0);
  w[5] = 0.3;
  W.set_column(2, w);
  ExplainOptions opt;
  opt.k = 1;
  const auto e = explain_class(net, W, layout, forward(net, random_tensor({1, 3, 12, 12}, 10, 0, 1)), 2, opt);
  ASSERT_EQ(e.features.size(), 1u);
  EXPECT_EQ(e.features[0].feature, feature_of_index(layout, 5));
  EXPECT_FALSE(e.truncated);
  opt.k = 0;
  EXPECT_THROW(explain_class(net, W, layout, forward(net, random_tensor({1, 3, 12, 12}, 10, 0, 1)), 2, opt),
               ConfigError);
}

TEST(Explain, TiesBrokenByLayerThenFilter) {
  Network net = small_net(11);
  // Identical filters give identical descriptor entries, hence identical responses under equal weights.
  auto& wt = net.layers[0].weights;
  const std::size_t per = wt.size() / 4;
  for (std::size_t q : {1u, 3u}) {
    std::copy_n(wt.data(), per, wt.data() + q * per);
    net.layers[0].bias[q] = net.layers[0].bias[0];
  }
  const auto layout = make_layout(net);
  RelevanceMatrix W{layout.m, 3, 1.0, std::vector<std::vector<RelevanceMatrix::Entry>>(3)};
  std::vector<double> w(layout.m, 0.0);
  w[3] = w[1] = w[0] = 0.5;
  W.set_column(0, w);
  ExplainOptions opt;
  opt.render = false;
  const auto e = explain_class(net, W, layout, forward(net, random_tensor({1, 3, 12, 12}, 12, 0, 1)), 0, opt);
  ASSERT_EQ(e.features.size(), 3u);
  ASSERT_EQ(e.features[0].response, e.features[2].response);
  EXPECT_EQ(e.features[0].feature, (FeatureId{0, 0}));
  EXPECT_EQ(e.features[1].feature, (FeatureId{0, 1}));
  EXPECT_EQ(e.features[2].feature, (FeatureId{0, 3}));
}

TEST(Explain, PositiveScalingKeepsRanking) {
  const Network net = small_net(13);
  const auto layout = make_layout(net);
  const auto W = dense_w(layout, 3, 14, 0.7);
  RelevanceMatrix S = W;
  for (auto& col : S.columns)
    for (auto& e : col) e.second *= 3.7;
  const auto trace = forward(net, random_tensor({1, 3, 12, 12}, 15, 0, 1));
  ExplainOptions opt;
  opt.k = 5;
  opt.render = false;
  for (int j = 0; j < 3; ++j) {
    const auto a = explain_class(net, W, layout, trace, j, opt), b = explain_class(net, S, layout, trace, j, opt);
    ASSERT_EQ(a.features.size(), b.features.size());
    for (std::size_t r = 0; r < a.features.size(); ++r) EXPECT_EQ(a.features[r].feature, b.features[r].feature);
  }
}

TEST(Explain, FcFeaturesRenderButUpsampledRefuses) {
  const Network net = small_net(16);
  const auto layout = make_layout(net);
  RelevanceMatrix W{layout.m, 3, 1.0, std::vector<std::vector<RelevanceMatrix::Entry>>(3)};
  std::vector<double> w(layout.m, 0.0);
  w[layout.m - 1] = 1.0;  // last unit of fc layer 6
  W.set_column(0, w);
  const auto trace = forward(net, random_tensor({1, 3, 12, 12}, 17, 0, 1));
  const auto e = explain_class(net, W, layout, trace, 0);
  ASSERT_EQ(e.features.size(), 1u);
  EXPECT_EQ(e.features[0].feature.layer, 6);
  ExplainOptions opt;
  opt.mode = HeatmapMode::upsampled_activation;
  EXPECT_THROW(explain_class(net, W, layout, trace, 0, opt), std::invalid_argument);
  opt.conv_only = true;
  EXPECT_TRUE(explain_class(net, W, layout, trace, 0, opt).features.empty());
}

TEST(Explain, BundleLayout) {
  const Network net = small_net(18);
  const auto layout = make_layout(net);
  const auto W = dense_w(layout, 3, 19, 0.8);
  const auto e = explain_image(net, W, layout, random_tensor({1, 3, 12, 12}, 20, 0, 1));
  const auto dir = std::filesystem::temp_directory_path() / "relfeat_bundle";
  std::filesystem::remove_all(dir);
  write_explanation(e, {"a", "b", "c"}, dir);
  const std::string pred = read_file(dir / "prediction.txt");
  EXPECT_EQ(pred.substr(0, 2), std::to_string(e.predicted_class) + "\t");
  const std::string manifest = read_file(dir / "manifest.tsv");
  for (std::size_t r = 0; r < e.features.size(); ++r) {
    const std::string file = "feature_" + std::to_string(r + 1) + "_" + to_string(e.features[r].feature) + ".png";
    EXPECT_TRUE(std::filesystem::exists(dir / file)) << file;
    EXPECT_NE(manifest.find(file), std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST(Explain, CombinedHeatmapIsPixelwiseMax) {
  Explanation e;
  e.features.resize(2);
  e.features[0].heatmap.values = Tensor({1, 1, 1, 3}, std::vector<float>{0.1f, 0.9f, 0.0f});
  e.features[1].heatmap.values = Tensor({1, 1, 1, 3}, std::vector<float>{0.5f, 0.2f, 0.0f});
  EXPECT_EQ(combined_heatmap(e, 1, 3).vector(), (std::vector<float>{0.5f, 0.9f, 0.0f}));
}

TEST(ReceptiveField, FirstConvKernelFive) {
  const Network net = small_net(21);
  const auto rf = receptive_field(net, 0, 0, 0);
  EXPECT_EQ(rf.side, 5);
  EXPECT_EQ(std::vector<long>({rf.y0, rf.x0, rf.y1, rf.x1}), std::vector<long>({0, 0, 4, 4}));
}

TEST(ReceptiveField, IdentityNetworkIsOnePixel) {
  Network net;
  net.input_side = 6;
  net.class_count = 2;
  net.layers.push_back(Layer::make_conv(1, 1, 1, 1, 0));
  net.layers.push_back(Layer::make(LayerKind::flatten));
  net.layers.push_back(Layer::make_fc(36, 2));
  net.layers.push_back(Layer::make(LayerKind::softmax));
  const auto rf = receptive_field(net, 0, 3, 4);
  EXPECT_EQ(std::vector<long>({rf.y0, rf.x0, rf.y1, rf.x1, rf.side}), std::vector<long>({3, 4, 3, 4, 1}));
  EXPECT_EQ(receptive_field(net, 2, 0, 0).side, 6);  // fc sees the whole image
}

// Oracle: support of the input gradient of one unit, with all-positive weights so nothing cancels.
TEST(ReceptiveField, MatchesGradientSupport) {
  for (int pad : {0, 1}) {
    Network net;
    const int side = pad == 0 ? 15 : 13;
    net.input_side = side;
    net.class_count = 2;
    net.layers.push_back(Layer::make_conv(1, 1, 3, 2, pad));
    net.layers.push_back(Layer::make_conv(1, 1, 3, 2, pad));
    const auto shapes = layer_output_shapes(net);
    const std::size_t out = shapes.back().h;
    net.layers.push_back(Layer::make(LayerKind::flatten));
    net.layers.push_back(Layer::make_fc(static_cast<int>(out * out), 2));
    net.layers.push_back(Layer::make(LayerKind::softmax));
    for (std::size_t l : {0u, 1u}) net.layers[l].weights = Tensor({1, 1, 3, 3}, 1.0f);
    validate(net);
    for (std::size_t y = 0; y < out; ++y)
      for (std::size_t x = 0; x < out; ++x) {
        Tensor g({1, 1, out, out});
        g.at(0, 0, y, x) = 1.0f;
        g = conv2d_transpose(g, net.layers[1].weights, net.layers[1].conv, shapes[0].h, shapes[0].w);
        g = conv2d_transpose(g, net.layers[0].weights, net.layers[0].conv, side, side);
        long y0 = 99, x0 = 99, y1 = -1, x1 = -1;
        for (long i = 0; i < side; ++i)
          for (long j = 0; j < side; ++j)
            if (g.at(0, 0, static_cast<std::size_t>(i), static_cast<std::size_t>(j)) != 0.0f) {
              y0 = std::min(y0, i), x0 = std::min(x0, j), y1 = std::max(y1, i), x1 = std::max(x1, j);
            }
        const auto rf = receptive_field(net, 1, y, x);
        EXPECT_EQ(rf.side, 7);
        EXPECT_EQ(std::vector<long>({rf.y0, rf.x0, rf.y1, rf.x1}), std::vector<long>({y0, x0, y1, x1}))
            << "pad " << pad << " at " << y << "," << x;
      }
  }
}

TEST(ReceptiveField, SideGrowsWithDepth) {
  const Network net = make_flower_net(6, 1);
  long prev = 0;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const long side = receptive_field(net, l, 0, 0).side;
    EXPECT_GE(side, prev) << "layer " << l;
    prev = side;
  }
}

TEST(ReceptiveField, BorderCropIsZeroPadded) {
  const Tensor img = random_tensor({1, 3, 12, 12}, 22, 0.5, 1.0);
  ReceptiveField rf{0, 0, 2, 2, -2, -2, 5};
  const Tensor c = crop_receptive_field(img, rf);
  EXPECT_EQ(c.shape(), (Shape{1, 3, 5, 5}));
  EXPECT_EQ(c.at(0, 1, 0, 4), 0.0f);
  EXPECT_EQ(c.at(0, 1, 2, 2), img.at(0, 1, 0, 0));
  EXPECT_EQ(c.at(0, 2, 4, 4), img.at(0, 2, 2, 2));
}

namespace {

RelevanceMatrix two_feature_w(const DescriptorLayout& layout) {
  RelevanceMatrix W{layout.m, 3, 1.0, std::vector<std::vector<RelevanceMatrix::Entry>>(3)};
  std::vector<double> w(layout.m, 0.0);
  w[1] = 0.4;  // L0F1
  w[6] = -0.2;  // L3F2
  W.set_column(0, w);
  return W;
}

}  // namespace

TEST(AverageVisualization, MeanEqualsMeanOfDumpedCrops) {
  const Network net = small_net(23);
  const auto layout = make_layout(net);
  const auto data = random_images(30, 100);
  std::vector<Tensor> crops;
  InterpretOptions opt;
  opt.top_n = 4;
  opt.crops = &crops;
  const auto av = average_visualization(net, two_feature_w(layout), layout, 0, data, opt);
  ASSERT_EQ(av.size(), 2u);
  EXPECT_EQ(av[0].feature, (FeatureId{0, 1}));
  ASSERT_EQ(crops.size(), 4u);
  EXPECT_EQ(av[0].count, 4u);
  EXPECT_FALSE(av[0].short_pool);
  EXPECT_EQ(av[0].mean_patch.shape(), (Shape{1, 3, 5, 5}));
  for (std::size_t k = 0; k < crops[0].size(); ++k) {
    double s = 0.0;
    for (const auto& c : crops) s += c[k];
    EXPECT_EQ(av[0].mean_patch[k], static_cast<float>(s / 4.0));
  }
  for (std::size_t idx : av[0].images) EXPECT_EQ(data.labels[idx], 0);
}

TEST(AverageVisualization, TopOneIsTheBestPatch) {
  const Network net = small_net(24);
  const auto layout = make_layout(net);
  const auto data = random_images(12, 200);
  InterpretOptions opt;
  opt.top_n = 1;
  const auto av = average_visualization(net, two_feature_w(layout), layout, 0, data, opt);
  const FeatureId f = av[1].feature;
  ASSERT_EQ(av[1].images.size(), 1u);
  const std::size_t best = av[1].images[0];
  double best_x = -1.0;
  std::size_t want = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.labels[i] != 0) continue;
    const double x = descriptor_values(forward(net, data.images[i]), net, layout)[index_of_feature(layout, f)];
    if (x > best_x) best_x = x, want = i;
  }
  EXPECT_EQ(best, want);
  const auto t = forward(net, data.images[best]);
  const auto [y, x] = response_argmax(net, t, f);
  EXPECT_EQ(av[1].mean_patch,
            crop_receptive_field(data.images[best], receptive_field(net, static_cast<std::size_t>(f.layer), y, x)));
}

TEST(AverageVisualization, IdenticalImagesAverageToOneCropAndShortPoolFlagged) {
  const Network net = small_net(25);
  const auto layout = make_layout(net);
  LabeledDataset d;
  d.class_names = {"a", "b", "c"};
  const Tensor img = random_tensor({1, 3, 12, 12}, 26, 0, 1);
  for (int i = 0; i < 5; ++i) {
    d.images.push_back(img);
    d.labels.push_back(0);
  }
  const auto av = average_visualization(net, two_feature_w(layout), layout, 0, d);
  for (const auto& v : av) {
    EXPECT_TRUE(v.short_pool);
    EXPECT_EQ(v.count, 5u);
    const auto [y, x] = response_argmax(net, forward(net, img), v.feature);
    const Tensor c = crop_receptive_field(img, receptive_field(net, static_cast<std::size_t>(v.feature.layer), y, x));
    EXPECT_LE(relfeat::testing::max_abs_diff(v.mean_patch, c), 1e-6);
  }
}
