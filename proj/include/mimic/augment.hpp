#pragma once

#include <algorithm>
#include <cmath>
#include <utility>

#include "mimic/common.hpp"
#include "mimic/image.hpp"
#include "mimic/rng.hpp"

namespace mimic {

/// SimCLR-style augmentation menu: random crop-and-resize, horizontal flip,
/// color jitter, random grayscale. Strengths follow the SimCLR defaults.
struct AugmentConfig {
  double crop_scale_min = 0.2;
  double crop_scale_max = 1.0;
  double crop_aspect_min = 3.0 / 4.0;
  double crop_aspect_max = 4.0 / 3.0;
  double flip_prob = 0.5;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double hue = 0.1;  // fraction of the full hue circle
  double grayscale_prob = 0.2;

  static AugmentConfig identity() {
    AugmentConfig c;
    c.crop_scale_min = c.crop_scale_max = 1.0;
    c.crop_aspect_min = c.crop_aspect_max = 1.0;
    c.flip_prob = 0.0;
    c.brightness = c.contrast = c.saturation = c.hue = 0.0;
    c.grayscale_prob = 0.0;
    return c;
  }
};

namespace detail {

inline float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

// Bilinear resize of the crop rect [x0,x0+cw) x [y0,y0+ch) back to WxH.
// An identity crop (cw==W, ch==H, origin 0) reproduces the input exactly.
inline void crop_resize(const ImageBatch& src, int b, int y0, int x0, int ch, int cw,
                        float* dst /* 3*H*W */) {
  const int H = src.height, W = src.width;
  const float sy = float(ch) / float(H), sx = float(cw) / float(W);
  for (int oy = 0; oy < H; ++oy) {
    float fy = (float(oy) + 0.5f) * sy - 0.5f;
    int iy = int(std::floor(fy));
    float wy = fy - float(iy);
    int iy0 = std::clamp(iy, 0, ch - 1), iy1 = std::clamp(iy + 1, 0, ch - 1);
    for (int ox = 0; ox < W; ++ox) {
      float fx = (float(ox) + 0.5f) * sx - 0.5f;
      int ix = int(std::floor(fx));
      float wx = fx - float(ix);
      int ix0 = std::clamp(ix, 0, cw - 1), ix1 = std::clamp(ix + 1, 0, cw - 1);
      for (int c = 0; c < 3; ++c) {
        float v00 = src.at(b, c, y0 + iy0, x0 + ix0);
        float v01 = src.at(b, c, y0 + iy0, x0 + ix1);
        float v10 = src.at(b, c, y0 + iy1, x0 + ix0);
        float v11 = src.at(b, c, y0 + iy1, x0 + ix1);
        float top = v00 + (v01 - v00) * wx;
        float bot = v10 + (v11 - v10) * wx;
        dst[c * H * W + oy * W + ox] = clamp01(top + (bot - top) * wy);
      }
    }
  }
}

inline void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  float mx = std::max({r, g, b}), mn = std::min({r, g, b});
  v = mx;
  float d = mx - mn;
  s = mx > 0 ? d / mx : 0.0f;
  if (d <= 0) {
    h = 0;
    return;
  }
  if (mx == r)
    h = std::fmod((g - b) / d, 6.0f);
  else if (mx == g)
    h = (b - r) / d + 2.0f;
  else
    h = (r - g) / d + 4.0f;
  h /= 6.0f;
  if (h < 0) h += 1.0f;
}

inline void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  float hh = std::fmod(h, 1.0f) * 6.0f;
  int i = int(hh) % 6;
  float f = hh - std::floor(hh);
  float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

inline float luma(float r, float g, float b) {
  return 0.299f * r + 0.587f * g + 0.114f * b;
}

// One augmented view of image b; all randomness drawn from `rng` in fixed order.
inline void augment_one(const ImageBatch& src, int b, const AugmentConfig& cfg, Rng& rng,
                        float* dst) {
  const int H = src.height, W = src.width;
  const int S = H * W;

  // random resized crop (10 attempts, torchvision-style)
  int cy0 = 0, cx0 = 0, ch = H, cw = W;
  for (int attempt = 0; attempt < 10; ++attempt) {
    double area = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max) * double(H) * double(W);
    double logr = rng.uniform(std::log(cfg.crop_aspect_min), std::log(cfg.crop_aspect_max));
    double ratio = std::exp(logr);
    int tw = int(std::lround(std::sqrt(area * ratio)));
    int th = int(std::lround(std::sqrt(area / ratio)));
    if (tw >= 1 && th >= 1 && tw <= W && th <= H) {
      cw = tw;
      ch = th;
      cx0 = (W - cw > 0) ? rng.uniform_int(W - cw + 1) : 0;
      cy0 = (H - ch > 0) ? rng.uniform_int(H - ch + 1) : 0;
      break;
    }
  }
  crop_resize(src, b, cy0, cx0, ch, cw, dst);

  if (rng.uniform() < cfg.flip_prob) {
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W / 2; ++x)
          std::swap(dst[c * S + y * W + x], dst[c * S + y * W + (W - 1 - x)]);
  }

  // color jitter: brightness, contrast, saturation, hue (fixed order)
  float fb = rng.uniform_f(float(1.0 - cfg.brightness), float(1.0 + cfg.brightness));
  float fc = rng.uniform_f(float(1.0 - cfg.contrast), float(1.0 + cfg.contrast));
  float fs = rng.uniform_f(float(1.0 - cfg.saturation), float(1.0 + cfg.saturation));
  float fh = rng.uniform_f(float(-cfg.hue), float(cfg.hue));
  if (fb != 1.0f)
    for (int i = 0; i < 3 * S; ++i) dst[i] = clamp01(dst[i] * fb);
  if (fc != 1.0f) {
    double mean = 0;
    for (int i = 0; i < S; ++i) mean += luma(dst[i], dst[S + i], dst[2 * S + i]);
    float m = float(mean / S);
    for (int i = 0; i < 3 * S; ++i) dst[i] = clamp01(m + (dst[i] - m) * fc);
  }
  if (fs != 1.0f) {
    for (int i = 0; i < S; ++i) {
      float g = luma(dst[i], dst[S + i], dst[2 * S + i]);
      dst[i] = clamp01(g + (dst[i] - g) * fs);
      dst[S + i] = clamp01(g + (dst[S + i] - g) * fs);
      dst[2 * S + i] = clamp01(g + (dst[2 * S + i] - g) * fs);
    }
  }
  if (fh != 0.0f) {
    for (int i = 0; i < S; ++i) {
      float h, s, v;
      rgb_to_hsv(dst[i], dst[S + i], dst[2 * S + i], h, s, v);
      h += fh;
      if (h < 0) h += 1.0f;
      float r, g, bl;
      hsv_to_rgb(h, s, v, r, g, bl);
      dst[i] = clamp01(r);
      dst[S + i] = clamp01(g);
      dst[2 * S + i] = clamp01(bl);
    }
  }

  if (rng.uniform() < cfg.grayscale_prob) {
    for (int i = 0; i < S; ++i) {
      float g = luma(dst[i], dst[S + i], dst[2 * S + i]);
      dst[i] = dst[S + i] = dst[2 * S + i] = clamp01(g);
    }
  }
}

}  // namespace detail

/// One augmented view per input. The per-image stream is derived from
/// (seed, sample id, view index) so results are order- and worker-independent.
inline ImageBatch augment_view(const ImageBatch& batch, const AugmentConfig& cfg, uint64_t seed,
                               int view_index) {
  ImageBatch out = batch;
#pragma omp parallel for schedule(static)
  for (int b = 0; b < batch.count(); ++b) {
    Rng rng(derive_seed(seed, "aug", uint64_t(batch.ids[b]) * 2 + uint64_t(view_index)));
    detail::augment_one(batch, b, cfg, rng, out.pixels.col(b).data());
  }
  return out;
}

/// Two independently augmented views of each input (the contrastive positive pair).
inline std::pair<ImageBatch, ImageBatch> augment_pair(const ImageBatch& batch,
                                                      const AugmentConfig& cfg, uint64_t seed) {
  return {augment_view(batch, cfg, seed, 0), augment_view(batch, cfg, seed, 1)};
}

}  // namespace mimic
