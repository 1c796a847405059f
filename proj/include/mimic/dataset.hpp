#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mimic/common.hpp"
#include "mimic/image.hpp"
#include "mimic/rng.hpp"

namespace mimic {

struct Dataset {
  ImageBatch train;
  ImageBatch test;
  int num_classes = 0;
  std::string source_id;
};

// Test-set sample ids live in a disjoint range from train ids.
inline constexpr int64_t kTestIdOffset = int64_t(1) << 20;

// ---------------------------------------------------------------------------
// CIFAR-10 binary format: 10000 records per batch file, each record is
// 1 label byte + 3072 pixel bytes (row-major per channel).
// ---------------------------------------------------------------------------

inline constexpr size_t kCifarRecordBytes = 3073;
inline constexpr int kCifarSide = 32;

inline ImageBatch load_cifar10_file(const std::filesystem::path& path, int64_t id_offset) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IngestionError("cannot open " + path.string());
  const auto size = size_t(in.tellg());
  if (size == 0) throw IngestionError("empty file: " + path.string());
  if (size % kCifarRecordBytes != 0)
    throw IngestionError("truncated CIFAR-10 file " + path.string() + ": " +
                         std::to_string(size) + " bytes, record boundary broken at byte offset " +
                         std::to_string((size / kCifarRecordBytes) * kCifarRecordBytes));
  const int n = int(size / kCifarRecordBytes);
  in.seekg(0);

  ImageBatch batch;
  batch.height = batch.width = kCifarSide;
  batch.pixels.resize(3 * kCifarSide * kCifarSide, n);
  batch.labels.resize(n);
  batch.ids.resize(n);
  std::vector<unsigned char> record(kCifarRecordBytes);
  for (int i = 0; i < n; ++i) {
    if (!in.read(reinterpret_cast<char*>(record.data()), kCifarRecordBytes))
      throw IngestionError("read failed at record " + std::to_string(i) + " of " + path.string());
    if (record[0] > 9)
      throw IngestionError("label byte " + std::to_string(int(record[0])) + " out of range in " +
                           path.string());
    batch.labels[i] = record[0];
    batch.ids[i] = id_offset + i;
    for (int k = 0; k < 3072; ++k) batch.pixels(k, i) = float(record[1 + k]) / 255.0f;
  }
  return batch;
}

inline ImageBatch concat_batches(const std::vector<ImageBatch>& parts) {
  ImageBatch out;
  if (parts.empty()) return out;
  out.height = parts[0].height;
  out.width = parts[0].width;
  int total = 0;
  for (const auto& p : parts) total += p.count();
  out.pixels.resize(parts[0].pixels.rows(), total);
  out.ids.reserve(total);
  bool labeled = parts[0].labeled();
  if (labeled) out.labels.reserve(total);
  int col = 0;
  for (const auto& p : parts) {
    out.pixels.middleCols(col, p.count()) = p.pixels;
    out.ids.insert(out.ids.end(), p.ids.begin(), p.ids.end());
    if (labeled) out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    col += p.count();
  }
  return out;
}

/// Loads CIFAR-10 from either a single batch file (train only, no test split)
/// or the standard directory layout data_batch_1..5.bin + test_batch.bin.
inline Dataset load_cifar10(const std::filesystem::path& path) {
  Dataset ds;
  ds.num_classes = 10;
  ds.source_id = "cifar10:" + path.string();
  if (std::filesystem::is_directory(path)) {
    std::vector<ImageBatch> parts;
    for (int i = 1; i <= 5; ++i) {
      auto f = path / ("data_batch_" + std::to_string(i) + ".bin");
      parts.push_back(load_cifar10_file(f, int64_t(i - 1) * 10000));
    }
    ds.train = concat_batches(parts);
    ds.test = load_cifar10_file(path / "test_batch.bin", kTestIdOffset);
  } else {
    ds.train = load_cifar10_file(path, 0);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Seeded synthetic dataset: class-distinctive shapes over low-amplitude noise.
// Runs the whole suite with no external downloads.
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  uint64_t seed = 1;
  int n = 1000;       // training images
  int classes = 10;
  int image_size = 32;
  int n_test = 0;
};

namespace detail {

inline bool shape_mask(int cls, float dx, float dy, float h) {
  const float r = std::sqrt(dx * dx + dy * dy);
  switch (cls) {
    case 0: return r <= 0.55f * h;                                        // disk
    case 1: return std::fabs(dx) <= 0.45f * h && std::fabs(dy) <= 0.45f * h;  // square
    case 2: return r >= 0.38f * h && r <= 0.60f * h;                      // ring
    case 3: {                                                             // frame
      float m = std::max(std::fabs(dx), std::fabs(dy));
      return m >= 0.32f * h && m <= 0.50f * h;
    }
    case 4:                                                               // plus
      return (std::fabs(dx) <= 1.6f && std::fabs(dy) <= 0.5f * h) ||
             (std::fabs(dy) <= 1.6f && std::fabs(dx) <= 0.5f * h);
    case 5:                                                               // X
      return std::fabs(std::fabs(dx) - std::fabs(dy)) <= 1.6f && std::fabs(dx) <= 0.5f * h &&
             std::fabs(dy) <= 0.5f * h;
    case 6:                                                               // two horizontal bars
      return std::fabs(dx) <= 0.5f * h && (std::fabs(dy - 0.28f * h) <= 1.4f ||
                                           std::fabs(dy + 0.28f * h) <= 1.4f);
    case 7:                                                               // two vertical bars
      return std::fabs(dy) <= 0.5f * h && (std::fabs(dx - 0.28f * h) <= 1.4f ||
                                           std::fabs(dx + 0.28f * h) <= 1.4f);
    case 8:                                                               // triangle
      return dy >= -0.5f * h && dy <= 0.5f * h && std::fabs(dx) <= 0.5f * (dy + 0.5f * h);
    case 9:                                                               // diamond outline
      return (std::fabs(dx) + std::fabs(dy)) >= 0.40f * h &&
             (std::fabs(dx) + std::fabs(dy)) <= 0.62f * h;
    default: return false;
  }
}

inline void render_synthetic(int label, Rng& rng, int side, float* dst) {
  const int S = side * side;
  for (int i = 0; i < 3 * S; ++i) dst[i] = rng.uniform_f(0.42f, 0.58f);

  // class shape, placed anywhere in the central 60% (may clip at edges)
  const float cx = rng.uniform_f(0.20f, 0.80f) * side;
  const float cy = rng.uniform_f(0.20f, 0.80f) * side;
  const float h = rng.uniform_f(0.34f, 0.55f) * side;  // shape extent
  const bool bright = rng.uniform() < 0.5;
  float color[3];
  for (auto& c : color)
    c = bright ? rng.uniform_f(0.82f, 1.0f) : rng.uniform_f(0.0f, 0.18f);

  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      if (shape_mask(label, float(x) - cx, float(y) - cy, h))
        for (int c = 0; c < 3; ++c) dst[c * S + y * side + x] = color[c];

  // small distractor patch over the full canvas, corners included, so every
  // image region carries feature content
  if (rng.uniform() < 0.7) {
    const int size = 3 + rng.uniform_int(3);
    const int px = rng.uniform_int(side - size + 1);
    const int py = rng.uniform_int(side - size + 1);
    const bool d_bright = rng.uniform() < 0.5;
    float dcolor[3];
    for (auto& c : dcolor)
      c = d_bright ? rng.uniform_f(0.82f, 1.0f) : rng.uniform_f(0.0f, 0.18f);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        for (int c = 0; c < 3; ++c) dst[c * S + (py + y) * side + (px + x)] = dcolor[c];
  }
}

inline ImageBatch generate_synthetic_batch(const SyntheticSpec& spec, int n, uint64_t stream,
                                           int64_t id_offset) {
  ImageBatch batch;
  batch.height = batch.width = spec.image_size;
  batch.pixels.resize(3 * spec.image_size * spec.image_size, n);
  batch.labels.resize(n);
  batch.ids.resize(n);
  for (int i = 0; i < n; ++i) {
    batch.labels[i] = i % spec.classes;
    batch.ids[i] = id_offset + i;
  }
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(spec.seed, "synth", stream * 0x10000000ULL + uint64_t(i)));
    detail::render_synthetic(batch.labels[i], rng, spec.image_size, batch.pixels.col(i).data());
  }
  return batch;
}

}  // namespace detail

inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2 || spec.classes > 10)
    throw ConfigError("synthetic classes must be in [2,10], got " + std::to_string(spec.classes));
  if (spec.n < 1) throw ConfigError("synthetic n must be positive");
  if (spec.image_size < 8) throw ConfigError("synthetic image_size must be >= 8");
  Dataset ds;
  ds.num_classes = spec.classes;
  ds.source_id = "synthetic:" + std::to_string(spec.seed) + ":" + std::to_string(spec.n);
  ds.train = detail::generate_synthetic_batch(spec, spec.n, 0, 0);
  if (spec.n_test > 0)
    ds.test = detail::generate_synthetic_batch(spec, spec.n_test, 1, kTestIdOffset);
  return ds;
}

/// Dispatch on format_id: "cifar10" reads from path, "synthetic" generates.
inline Dataset load_dataset(const std::string& path, const std::string& format_id,
                            const SyntheticSpec& spec = {}) {
  if (format_id == "cifar10") return load_cifar10(path);
  if (format_id == "synthetic") return generate_synthetic(spec);
  throw ConfigError("unknown dataset format_id: " + format_id);
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitPlan {
  double clean_ratio = 0.04;   // gamma
  double poison_ratio = 0.0;   // contamination of the defender set
  uint64_t seed = 0;
  bool class_balanced = false; // defender sampling: i.i.d. uniform by default
};

struct Splits {
  ImageBatch pretrain;    // unlabeled
  ImageBatch defender;    // unlabeled, possibly contaminated
  ImageBatch down_train;  // labeled
  ImageBatch down_test;   // labeled
  std::vector<int64_t> poisoned_defender_ids;
};

/// Defender subset of size round(gamma*N) drawn from the pretraining set;
/// downstream train/test are disjoint halves of the held-out test set.
/// Contamination stamps `trig` on round(poison_ratio * defender size) images.
template <class StampFn>
inline Splits make_splits(const Dataset& ds, const SplitPlan& plan, StampFn&& stamp) {
  if (plan.clean_ratio <= 0.0 || plan.clean_ratio > 1.0)
    throw ConfigError("clean_ratio must be in (0,1]");
  if (plan.poison_ratio < 0.0 || plan.poison_ratio >= 1.0)
    throw ConfigError("poison_ratio must be in [0,1)");
  const int n = ds.train.count();
  const int defender_n = int(std::lround(plan.clean_ratio * double(n)));
  if (defender_n < 1) throw ConfigError("clean_ratio * dataset size < 1");

  Splits out;
  out.pretrain = ds.train.without_labels();

  Rng rng(derive_seed(plan.seed, "split"));
  std::vector<int> idx;
  if (plan.class_balanced && ds.train.labeled()) {
    std::vector<std::vector<int>> per_class(ds.num_classes);
    for (int i = 0; i < n; ++i) per_class[ds.train.labels[i]].push_back(i);
    for (auto& v : per_class) rng.shuffle(v);
    int k = 0;
    while (int(idx.size()) < defender_n) {
      for (int c = 0; c < ds.num_classes && int(idx.size()) < defender_n; ++c)
        if (k < int(per_class[c].size())) idx.push_back(per_class[c][k]);
      ++k;
    }
  } else {
    std::vector<int> perm = rng.permutation(n);
    idx.assign(perm.begin(), perm.begin() + defender_n);
  }
  std::sort(idx.begin(), idx.end());  // defender ordered by position (stable ids)
  out.defender = ds.train.select(idx).without_labels();

  const int n_poison = int(std::lround(plan.poison_ratio * double(defender_n)));
  if (n_poison > 0) {
    std::vector<int> perm = rng.permutation(defender_n);
    std::vector<int> chosen(perm.begin(), perm.begin() + n_poison);
    ImageBatch sub = out.defender.select(chosen);
    ImageBatch stamped = stamp(sub);
    for (int k = 0; k < n_poison; ++k) {
      out.defender.pixels.col(chosen[k]) = stamped.pixels.col(k);
      out.poisoned_defender_ids.push_back(stamped.ids[k]);
    }
    std::sort(out.poisoned_defender_ids.begin(), out.poisoned_defender_ids.end());
  }

  if (ds.test.count() > 0) {
    if (!ds.test.labeled()) throw ContractError("test split must be labeled");
    std::vector<int> tperm = rng.permutation(ds.test.count());
    const int half = ds.test.count() / 2;
    std::vector<int> a(tperm.begin(), tperm.begin() + half);
    std::vector<int> b(tperm.begin() + half, tperm.end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    out.down_train = ds.test.select(a);
    out.down_test = ds.test.select(b);
  }
  return out;
}

inline Splits make_splits(const Dataset& ds, const SplitPlan& plan) {
  if (plan.poison_ratio > 0.0)
    throw ConfigError("poison_ratio > 0 requires a trigger stamp function");
  return make_splits(ds, plan, [](const ImageBatch& b) { return b; });
}

}  // namespace mimic
