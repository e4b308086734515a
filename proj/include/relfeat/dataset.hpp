#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "relfeat/common.hpp"
#include "relfeat/tensor.hpp"

namespace relfeat {

/// Where an augmented sample came from; -1 when not applicable (e.g. MNIST).
struct SampleInfo {
  int frame = -1;
  int crop = -1;
  int angle = -1;
  bool substituted = false;
};

/// In-memory labelled image set. Images are 1 x C x S x S tensors in [0, 1];
/// masks, when present, are 1 x 1 x S x S with values in {0, 1}.
struct LabeledDataset {
  std::vector<Tensor> images;
  std::vector<int> labels;
  std::vector<std::string> class_names;
  std::vector<int> folds;
  std::vector<std::string> mask_paths;
  std::vector<Tensor> masks;
  std::vector<SampleInfo> info;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
  int class_count() const { return static_cast<int>(class_names.size()); }
  bool has_masks() const { return masks.size() == images.size() && !images.empty(); }
  bool has_folds() const { return folds.size() == images.size() && !images.empty(); }

  void validate() const {
    if (labels.size() != images.size()) throw DataError("dataset: label count does not match image count");
    if (images.empty()) return;
    const Shape first = images.front().shape();
    for (std::size_t i = 0; i < images.size(); ++i) {
      const Shape& s = images[i].shape();
      if (s.n != 1 || s.c != first.c || s.h != first.h || s.w != first.w)
        throw DataError("dataset: image " + std::to_string(i) + " has shape " + to_string(s) + ", expected " +
                        to_string(first));
      if (labels[i] < 0 || labels[i] >= class_count())
        throw DataError("dataset: label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) +
                        " outside [0, " + std::to_string(class_count()) + ")");
    }
  }

  /// Copy of the samples at `indices`, in that order.
  LabeledDataset subset(const std::vector<std::size_t>& indices) const {
    LabeledDataset out;
    out.class_names = class_names;
    for (std::size_t i : indices) {
      out.images.push_back(images.at(i));
      out.labels.push_back(labels.at(i));
      if (has_folds()) out.folds.push_back(folds[i]);
      if (mask_paths.size() == images.size()) out.mask_paths.push_back(mask_paths[i]);
      if (has_masks()) out.masks.push_back(masks[i]);
      if (info.size() == images.size()) out.info.push_back(info[i]);
    }
    return out;
  }

  std::vector<std::size_t> indices_where(auto pred) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (pred(i)) out.push_back(i);
    return out;
  }

  /// Train/test split by fold: fold `test_fold` is held out.
  std::pair<LabeledDataset, LabeledDataset> split_fold(int test_fold) const {
    if (!has_folds()) throw DataError("dataset has no fold assignment");
    return {subset(indices_where([&](std::size_t i) { return folds[i] != test_fold; })),
            subset(indices_where([&](std::size_t i) { return folds[i] == test_fold; }))};
  }

  std::size_t image_side() const { return images.empty() ? 0 : images.front().shape().h; }
  std::size_t image_channels() const { return images.empty() ? 0 : images.front().shape().c; }
};

}  // namespace relfeat
