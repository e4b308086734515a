#pragma once

#include "relfeat/dataset.hpp"
#include "relfeat/descriptor.hpp"
#include "relfeat/network.hpp"
#include "test_util.hpp"

namespace relfeat::testing {


// conv(3->4, 5, s1) relu pool2 conv(4->6, 3, s1, p1) relu flatten fc(96->8) relu fc(8->3) softmax on 12x12.
inline Network small_net(std::uint64_t seed) {
  Network net;
  net.input_side = 12;
  net.input_channels = 3;
  net.class_count = 3;
  net.layers.push_back(Layer::make_conv(3, 4, 5, 1, 0));
  net.layers.push_back(Layer::make(LayerKind::relu));
  net.layers.push_back(Layer::make_pool(2, 2));
  net.layers.push_back(Layer::make_conv(4, 6, 3, 1, 1));
  net.layers.push_back(Layer::make(LayerKind::relu));
  net.layers.push_back(Layer::make(LayerKind::flatten));
  net.layers.push_back(Layer::make_fc(96, 8));
  net.layers.push_back(Layer::make(LayerKind::relu));
  net.layers.push_back(Layer::make_fc(8, 3));
  net.layers.push_back(Layer::make(LayerKind::softmax));
  init_weights(net, seed);
  Rng rng(seed + 9);
  for (Layer& l : net.layers)
    for (float& b : l.bias) b = static_cast<float>(rng.uniform(0.0, 0.1));
  validate(net);
  return net;
}

inline RelevanceMatrix dense_w(const DescriptorLayout& layout, std::size_t classes, std::uint64_t seed, double density) {
  RelevanceMatrix W{layout.m, classes, 1.0, std::vector<std::vector<RelevanceMatrix::Entry>>(classes)};
  Rng rng(seed);
  for (std::size_t j = 0; j < classes; ++j) {
    std::vector<double> w(layout.m, 0.0);
    for (double& v : w)
      if (rng.uniform() < density) v = rng.uniform(-1.0, 1.0);
    W.set_column(j, w);
  }
  return W;
}

inline LabeledDataset random_images(std::size_t n, std::uint64_t seed) {
  LabeledDataset d;
  d.class_names = {"a", "b", "c"};
  for (std::size_t i = 0; i < n; ++i) {
    d.images.push_back(random_tensor({1, 3, 12, 12}, seed + i, 0.0, 1.0));
    d.labels.push_back(static_cast<int>(i % 3));
  }
  return d;
}

}  // namespace relfeat::testing
