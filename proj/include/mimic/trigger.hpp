#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "mimic/common.hpp"
#include "mimic/image.hpp"
#include "mimic/rng.hpp"

namespace mimic {

/// Patch trigger: a solid-color (or explicit-pattern) rectangle anchored at an
/// image corner. Default is the 10x10 white square at the bottom-right corner
/// with a 1-pixel margin.
struct TriggerSpec {
  enum class Corner { top_left, top_right, bottom_left, bottom_right };

  int height = 10;
  int width = 10;
  Corner corner = Corner::bottom_right;
  int offset_y = 1;  // margin between patch and anchored corner
  int offset_x = 1;
  std::array<float, 3> color = {1.0f, 1.0f, 1.0f};
  MatF pattern;  // optional (3*height*width) x 1; empty means solid color
  int target_class = 0;
  int64_t reference_image_id = -1;

  /// Top-left pixel of the patch within an HxW image. Throws if out of bounds.
  std::pair<int, int> placement(int image_h, int image_w) const {
    int y0 = 0, x0 = 0;
    switch (corner) {
      case Corner::top_left: y0 = offset_y; x0 = offset_x; break;
      case Corner::top_right: y0 = offset_y; x0 = image_w - offset_x - width; break;
      case Corner::bottom_left: y0 = image_h - offset_y - height; x0 = offset_x; break;
      case Corner::bottom_right:
        y0 = image_h - offset_y - height;
        x0 = image_w - offset_x - width;
        break;
    }
    if (y0 < 0 || x0 < 0 || y0 + height > image_h || x0 + width > image_w)
      throw ParameterError("trigger placement out of bounds for " + std::to_string(image_h) +
                           "x" + std::to_string(image_w) + " image");
    return {y0, x0};
  }

  float value_at(int channel, int py, int px) const {
    if (pattern.size() > 0) return pattern(channel * height * width + py * width + px, 0);
    return color[channel];
  }

  uint64_t hash() const {
    uint64_t h = fnv1a64(&height, sizeof(height));
    h = fnv1a64(&width, sizeof(width), h);
    int c = int(corner);
    h = fnv1a64(&c, sizeof(c), h);
    h = fnv1a64(&offset_y, sizeof(offset_y), h);
    h = fnv1a64(&offset_x, sizeof(offset_x), h);
    h = fnv1a64(color.data(), sizeof(color), h);
    if (pattern.size() > 0) h = fnv1a64(pattern.data(), sizeof(float) * pattern.size(), h);
    h = fnv1a64(&target_class, sizeof(target_class), h);
    return h;
  }
};

/// Overwrites the trigger region with the patch pattern; all other pixels are
/// untouched. Idempotent by construction.
inline ImageBatch stamp_trigger(const ImageBatch& batch, const TriggerSpec& trig) {
  for (float v : trig.color)
    if (v < 0.0f || v > 1.0f) throw ParameterError("trigger color outside [0,1]");
  if (trig.pattern.size() > 0 &&
      ((trig.pattern.array() < 0.0f).any() || (trig.pattern.array() > 1.0f).any()))
    throw ParameterError("trigger pattern outside [0,1]");
  auto [y0, x0] = trig.placement(batch.height, batch.width);
  ImageBatch out = batch;
  for (int b = 0; b < out.count(); ++b)
    for (int c = 0; c < 3; ++c)
      for (int py = 0; py < trig.height; ++py)
        for (int px = 0; px < trig.width; ++px)
          out.at(b, c, y0 + py, x0 + px) = trig.value_at(c, py, px);
  return out;
}

}  // namespace mimic
