#include <gtest/gtest.h>

#include <numeric>
#include <sstream>

#include "relfeat/descriptor.hpp"
#include "test_util.hpp"

using namespace relfeat;
using relfeat::testing::random_tensor;
using relfeat::testing::rel_err;

namespace {

Network small_net(std::uint64_t seed) {
  Network net;
  net.input_side = 10;
  net.input_channels = 1;
  net.class_count = 3;
  net.layers.push_back(Layer::make_conv(1, 4, 3, 1, 0));
  net.layers.push_back(Layer::make(LayerKind::relu));
  net.layers.push_back(Layer::make_pool(2, 2));
  net.layers.push_back(Layer::make_conv(4, 6, 3, 1, 1));
  net.layers.push_back(Layer::make(LayerKind::flatten));
  net.layers.push_back(Layer::make_fc(6 * 16, 7));
  net.layers.push_back(Layer::make(LayerKind::relu));
  net.layers.push_back(Layer::make_fc(7, 3));
  net.layers.push_back(Layer::make(LayerKind::softmax));
  init_weights(net, seed);
  return net;
}

LabeledDataset random_dataset(std::size_t n, std::uint64_t seed) {
  LabeledDataset d;
  d.class_names = {"a", "b", "c"};
  for (std::size_t i = 0; i < n; ++i) {
    d.images.push_back(random_tensor({1, 1, 10, 10}, seed + i, 0, 1));
    d.labels.push_back(static_cast<int>(i % 3));
  }
  return d;
}

}  // namespace

TEST(Layout, CoversNonTailParametricLayers) {
  const Network net = small_net(1);
  const auto layout = make_layout(net);
  ASSERT_EQ(layout.segments.size(), 3u);
  EXPECT_EQ(layout.m, 4u + 6u + 7u);
  // Prefix-sum oracle for segment offsets.
  std::size_t offset = 0;
  for (const auto& s : layout.segments) {
    EXPECT_EQ(s.offset, offset);
    offset += static_cast<std::size_t>(net.layers[static_cast<std::size_t>(s.layer)].units());
  }
  EXPECT_EQ(layout.segments.back().layer, 5);
}

TEST(Layout, IndexRoundTrip) {
  const Network net = small_net(2);
  const auto layout = make_layout(net);
  EXPECT_EQ(feature_of_index(layout, 0), (FeatureId{0, 0}));
  for (std::size_t i = 0; i < layout.m; ++i) EXPECT_EQ(index_of_feature(layout, feature_of_index(layout, i)), i);
  EXPECT_EQ(feature_of_index(layout, 4), (FeatureId{3, 0}));
  EXPECT_THROW(feature_of_index(layout, layout.m), std::out_of_range);
  EXPECT_THROW(index_of_feature(layout, {7, 0}), std::out_of_range);
}

TEST(Descriptor, HandComputedTwoChannelSegment) {
  Network net;
  net.input_side = 1;
  net.input_channels = 1;
  net.class_count = 2;
  net.layers.push_back(Layer::make_conv(1, 2, 1, 1, 0));
  net.layers.push_back(Layer::make(LayerKind::flatten));
  net.layers.push_back(Layer::make_fc(2, 2));
  net.layers.push_back(Layer::make(LayerKind::softmax));
  net.layers[0].weights = Tensor({2, 1, 1, 1}, std::vector<float>{3, 4});
  const auto d = extract_descriptor(forward(net, Tensor({1, 1, 1, 1}, 1.0f)), net);
  ASSERT_EQ(d.values.size(), 2u);
  EXPECT_NEAR(d.values[0], 3.0 / 7.0, 1e-12);
  EXPECT_NEAR(d.values[1], 4.0 / 7.0, 1e-12);
}

TEST(Descriptor, AllZeroSegmentStaysZero) {
  Network net = small_net(3);
  net = zero_filters(net, std::vector<FeatureId>{{0, 0}, {0, 1}, {0, 2}, {0, 3}});
  const auto d = extract_descriptor(forward(net, random_tensor({1, 1, 10, 10}, 4)), net);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(d.values[i], 0.0);
}

TEST(Descriptor, MatchesNaiveOracle) {
  const Network net = small_net(5);
  const auto trace = forward(net, random_tensor({1, 1, 10, 10}, 6, 0, 1));
  const auto d = extract_descriptor(trace, net);
  // Oracle: layer 0 read after its relu (layer 1); layer 3 has no relu; layer 5 read after relu (layer 6).
  const std::vector<std::pair<std::size_t, std::size_t>> reads{{0, 1}, {3, 3}, {5, 6}};
  std::size_t offset = 0;
  for (auto [layer, src] : reads) {
    const Tensor& t = trace.outputs[src];
    std::vector<double> norms(t.shape().c);
    for (std::size_t c = 0; c < t.shape().c; ++c) {
      double acc = 0;
      for (std::size_t y = 0; y < t.shape().h; ++y)
        for (std::size_t x = 0; x < t.shape().w; ++x) acc += static_cast<double>(t.at(0, c, y, x)) * t.at(0, c, y, x);
      norms[c] = std::sqrt(acc);
    }
    const double sum = std::accumulate(norms.begin(), norms.end(), 0.0);
    for (std::size_t c = 0; c < norms.size(); ++c) {
      const double want = sum > 0 ? norms[c] / sum : 0.0;
      EXPECT_LE(std::abs(d.values[offset + c] - want), 1e-6 * std::max(1.0, want)) << "layer " << layer;
    }
    offset += norms.size();
  }
}

TEST(Descriptor, SegmentsNormalisedAndNonnegative) {
  const Network net = small_net(7);
  for (int i = 0; i < 20; ++i) {
    const auto d = extract_descriptor(forward(net, random_tensor({1, 1, 10, 10}, 100 + i, 0, 1)), net);
    for (const auto& seg : d.layout.segments) {
      double sum = 0;
      for (int q = 0; q < seg.channels; ++q) {
        EXPECT_GE(d.values[seg.offset + q], 0.0);
        sum += d.values[seg.offset + q];
      }
      EXPECT_TRUE(sum == 0.0 || std::abs(sum - 1.0) <= 1e-6);
    }
  }
}

TEST(Descriptor, PreReluOption) {
  const Network net = small_net(8);
  const auto trace = forward(net, random_tensor({1, 1, 10, 10}, 9));
  const auto pre = descriptor_values(trace, net, make_layout(net, {true, true, false}));
  const auto norms = channel_l2(trace.outputs[0]);
  const double sum = std::accumulate(norms.begin(), norms.end(), 0.0);
  EXPECT_LE(rel_err(pre[0], norms[0] / sum), 1e-9);
}

TEST(Descriptor, UncapturedTraceRejected) {
  const Network net = small_net(10);
  EXPECT_THROW(extract_descriptor(forward(net, random_tensor({1, 1, 10, 10}, 1), false), net), std::invalid_argument);
}

TEST(Matrices, ColumnsAreDescriptorsAndLabelsOneHot) {
  const Network net = small_net(11);
  const auto data = random_dataset(9, 50);
  const auto mats = build_matrices(net, data, 2);
  ASSERT_EQ(mats.m(), make_layout(net).m);
  ASSERT_EQ(mats.n(), 9u);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto x = extract_descriptor(forward(net, data.images[i]), net).values;
    for (std::size_t r = 0; r < x.size(); ++r) EXPECT_EQ(mats.X(r, i), x[r]);
    EXPECT_EQ(mats.L.col(i).sum(), 1.0);
    EXPECT_EQ(mats.L(data.labels[i], i), 1.0);
  }
}

TEST(Matrices, SingleImage) {
  const Network net = small_net(12);
  const auto mats = build_matrices(net, random_dataset(1, 7));
  EXPECT_EQ(mats.X.cols(), 1);
  EXPECT_EQ(mats.L.rows(), 3);
}

TEST(Matrices, PermutationEquivariant) {
  const Network net = small_net(13);
  const auto data = random_dataset(6, 70);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  const auto a = build_matrices(net, data);
  const auto b = build_matrices(net, data.subset(perm));
  for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_EQ(b.X.col(i), a.X.col(perm[i]));
}

TEST(Matrices, LabelOutOfRangeRejected) {
  const Network net = small_net(14);
  auto data = random_dataset(3, 1);
  data.labels[1] = 5;
  EXPECT_THROW(build_matrices(net, data), DataError);
}

TEST(Matrices, TextDumpHeader) {
  const Network net = small_net(15);
  const auto mats = build_matrices(net, random_dataset(2, 3));
  std::ostringstream s;
  write_matrices(s, mats);
  std::istringstream in(s.str());
  std::size_t m, n, c;
  in >> m >> n >> c;
  EXPECT_EQ(m, mats.m());
  EXPECT_EQ(n, 2u);
  EXPECT_EQ(c, 3u);
  double v;
  std::size_t count = 0;
  while (in >> v) ++count;
  EXPECT_EQ(count, m * n + c * n);
}
