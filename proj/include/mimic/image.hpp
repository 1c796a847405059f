#pragma once

#include <cstdint>
#include <vector>

#include "mimic/common.hpp"

namespace mimic {

/// Batch of RGB images in [0,1]. Storage: one column per image, channel-major
/// within the column (index c*H*W + y*W + x). Labels are present only for
/// downstream/eval batches; an empty vector means unlabeled.
struct ImageBatch {
  int height = 0;
  int width = 0;
  MatF pixels;                   // (3*H*W) x B
  std::vector<int> labels;       // size B or empty
  std::vector<int64_t> ids;      // size B, stable sample identifiers

  int count() const { return int(pixels.cols()); }
  bool labeled() const { return !labels.empty(); }

  float& at(int image, int channel, int y, int x) {
    return pixels(channel * height * width + y * width + x, image);
  }
  float at(int image, int channel, int y, int x) const {
    return pixels(channel * height * width + y * width + x, image);
  }

  ImageBatch select(const std::vector<int>& idx) const {
    ImageBatch out;
    out.height = height;
    out.width = width;
    out.pixels.resize(pixels.rows(), idx.size());
    out.ids.resize(idx.size());
    if (labeled()) out.labels.resize(idx.size());
    for (size_t k = 0; k < idx.size(); ++k) {
      out.pixels.col(k) = pixels.col(idx[k]);
      out.ids[k] = ids[idx[k]];
      if (labeled()) out.labels[k] = labels[idx[k]];
    }
    return out;
  }

  ImageBatch without_labels() const {
    ImageBatch out = *this;
    out.labels.clear();
    return out;
  }

  bool in_unit_range() const {
    return (pixels.array() >= 0.0f).all() && (pixels.array() <= 1.0f).all();
  }
};

}  // namespace mimic
