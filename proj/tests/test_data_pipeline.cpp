#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>

#include "mimic/augment.hpp"
#include "mimic/dataset.hpp"
#include "mimic/trigger.hpp"

using namespace mimic;

namespace {

namespace fs = std::filesystem;

fs::path scratch_dir() {
  auto dir = fs::temp_directory_path() / "mimic_data_tests";
  fs::create_directories(dir);
  return dir;
}

// writes n CIFAR-10 records with label = i % 10 and a recognizable pixel ramp
void write_cifar_file(const fs::path& path, int n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  std::vector<unsigned char> rec(kCifarRecordBytes);
  for (int i = 0; i < n; ++i) {
    rec[0] = (unsigned char)(i % 10);
    for (int k = 0; k < 3072; ++k) rec[1 + k] = (unsigned char)((i + k) % 256);
    out.write(reinterpret_cast<const char*>(rec.data()), rec.size());
  }
}

}  // namespace

TEST_CASE("CIFAR-10 binary layout: 10000 records of 3073 bytes decode to 32x32x3") {
  auto path = scratch_dir() / "batch_full.bin";
  write_cifar_file(path, 10000);
  CHECK(fs::file_size(path) == 10000u * 3073u);
  ImageBatch b = load_cifar10_file(path, 0);
  CHECK(b.count() == 10000);
  CHECK(b.height == 32);
  CHECK(b.width == 32);
  CHECK(b.pixels.rows() == 3072);
  CHECK(b.labels[7] == 7);
  CHECK(b.pixels(0, 1) == Catch::Approx(1.0 / 255.0));
  CHECK(b.in_unit_range());
  fs::remove(path);
}

TEST_CASE("CIFAR-10 loader rejects empty and truncated files") {
  auto empty = scratch_dir() / "empty.bin";
  std::ofstream(empty, std::ios::trunc).close();
  CHECK_THROWS_AS(load_cifar10_file(empty, 0), IngestionError);

  auto trunc = scratch_dir() / "trunc.bin";
  write_cifar_file(trunc, 3);
  fs::resize_file(trunc, 3 * 3073 - 100);
  try {
    load_cifar10_file(trunc, 0);
    FAIL("expected IngestionError");
  } catch (const IngestionError& e) {
    CHECK(std::string(e.what()).find("byte offset 6146") != std::string::npos);
  }
  fs::remove(trunc);
  fs::remove(empty);
}

TEST_CASE("synthetic generator contract: n=500, 10 labeled classes") {
  SyntheticSpec spec{.seed = 5, .n = 500, .classes = 10, .image_size = 32, .n_test = 60};
  Dataset ds = generate_synthetic(spec);
  CHECK(ds.train.count() == 500);
  CHECK(ds.train.labeled());
  CHECK(ds.test.count() == 60);
  CHECK(ds.train.in_unit_range());
  int max_label = *std::max_element(ds.train.labels.begin(), ds.train.labels.end());
  CHECK(max_label == 9);
  // deterministic regeneration
  Dataset ds2 = generate_synthetic(spec);
  CHECK(ds.train.pixels == ds2.train.pixels);
  // test ids disjoint from train ids
  CHECK(ds.test.ids[0] >= kTestIdOffset);
  CHECK_THROWS_AS(load_dataset("", "nope", spec), ConfigError);
}

TEST_CASE("identity augmentation pipeline returns the input") {
  SyntheticSpec spec{.seed = 2, .n = 6, .classes = 3, .image_size = 32};
  Dataset ds = generate_synthetic(spec);
  auto [va, vb] = augment_pair(ds.train, AugmentConfig::identity(), 123);
  CHECK(va.pixels == ds.train.pixels);
  CHECK(vb.pixels == ds.train.pixels);
}

TEST_CASE("grayscale augmentation equalizes channels") {
  SyntheticSpec spec{.seed = 3, .n = 4, .classes = 2, .image_size = 16};
  Dataset ds = generate_synthetic(spec);
  AugmentConfig cfg = AugmentConfig::identity();
  cfg.grayscale_prob = 1.0;
  ImageBatch v = augment_view(ds.train, cfg, 9, 0);
  const int S = 16 * 16;
  for (int b = 0; b < v.count(); ++b)
    for (int s = 0; s < S; ++s) {
      CHECK(v.pixels(s, b) == v.pixels(S + s, b));
      CHECK(v.pixels(s, b) == v.pixels(2 * S + s, b));
    }
}

TEST_CASE("augmentation is deterministic in (batch, seed) and stays in [0,1]") {
  SyntheticSpec spec{.seed = 4, .n = 12, .classes = 4, .image_size = 32};
  Dataset ds = generate_synthetic(spec);
  AugmentConfig cfg;  // full default menu
  auto [a1, b1] = augment_pair(ds.train, cfg, 77);
  auto [a2, b2] = augment_pair(ds.train, cfg, 77);
  CHECK(a1.pixels == a2.pixels);
  CHECK(b1.pixels == b2.pixels);
  auto [a3, b3] = augment_pair(ds.train, cfg, 78);
  CHECK(a1.pixels != a3.pixels);
  CHECK(a1.in_unit_range());
  CHECK(b1.in_unit_range());
  // views are independent
  CHECK(a1.pixels != b1.pixels);
}

TEST_CASE("stamp_trigger: 10x10 white square changes exactly 100 pixels per channel") {
  ImageBatch img;
  img.height = img.width = 32;
  img.pixels = MatF::Constant(3072, 1, 0.25f);
  img.ids = {0};
  TriggerSpec trig;  // defaults: 10x10 white, bottom-right, 1px margin
  ImageBatch stamped = stamp_trigger(img, trig);
  int changed[3] = {0, 0, 0};
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        if (stamped.at(0, c, y, x) != img.at(0, c, y, x)) {
          ++changed[c];
          CHECK(stamped.at(0, c, y, x) == 1.0f);
          CHECK(y >= 21);
          CHECK(y <= 30);
          CHECK(x >= 21);
          CHECK(x <= 30);
        }
  CHECK(changed[0] == 100);
  CHECK(changed[1] == 100);
  CHECK(changed[2] == 100);

  // idempotent
  ImageBatch twice = stamp_trigger(stamped, trig);
  CHECK(twice.pixels == stamped.pixels);
}

TEST_CASE("stamp_trigger: 3x3 trigger changes exactly 9 pixels per channel") {
  ImageBatch img;
  img.height = img.width = 32;
  img.pixels = MatF::Constant(3072, 2, 0.5f);
  img.ids = {0, 1};
  TriggerSpec trig;
  trig.height = trig.width = 3;
  ImageBatch stamped = stamp_trigger(img, trig);
  for (int b = 0; b < 2; ++b) {
    int changed = 0;
    for (int c = 0; c < 3; ++c)
      for (int k = 0; k < 1024; ++k)
        if (stamped.pixels(c * 1024 + k, b) != 0.5f) ++changed;
    CHECK(changed == 27);
  }
}

TEST_CASE("trigger locality and bounds errors") {
  SyntheticSpec spec{.seed = 6, .n = 3, .classes = 2, .image_size = 32};
  Dataset ds = generate_synthetic(spec);
  TriggerSpec trig;
  ImageBatch stamped = stamp_trigger(ds.train, trig);
  auto [y0, x0] = trig.placement(32, 32);
  for (int b = 0; b < 3; ++b)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
          bool inside = y >= y0 && y < y0 + 10 && x >= x0 && x < x0 + 10;
          if (!inside) CHECK(stamped.at(b, c, y, x) == ds.train.at(b, c, y, x));
        }

  TriggerSpec huge;
  huge.height = huge.width = 40;
  CHECK_THROWS_AS(stamp_trigger(ds.train, huge), ParameterError);
  TriggerSpec bad_color;
  bad_color.color = {1.5f, 0.0f, 0.0f};
  CHECK_THROWS_AS(stamp_trigger(ds.train, bad_color), ParameterError);
}

TEST_CASE("make_splits: sizes, determinism, poison counts") {
  // N=50000 at gamma=0.04 -> 2000 defender images (cheap 2x2 stand-in pixels)
  Dataset big;
  big.num_classes = 10;
  big.train.height = big.train.width = 2;
  big.train.pixels = MatF::Zero(12, 50000);
  big.train.ids.resize(50000);
  big.train.labels.resize(50000);
  for (int i = 0; i < 50000; ++i) {
    big.train.ids[i] = i;
    big.train.labels[i] = i % 10;
  }
  SplitPlan plan{.clean_ratio = 0.04, .poison_ratio = 0.0, .seed = 9};
  Splits s = make_splits(big, plan);
  CHECK(s.defender.count() == 2000);
  CHECK_FALSE(s.defender.labeled());
  CHECK_FALSE(s.pretrain.labeled());

  // poison_ratio = 0 -> no stamped images; 0.25 -> exactly 500
  CHECK(s.poisoned_defender_ids.empty());
  int stamp_calls = 0;
  SplitPlan plan25{.clean_ratio = 0.04, .poison_ratio = 0.25, .seed = 9};
  Splits s25 = make_splits(big, plan25, [&](const ImageBatch& b) {
    stamp_calls += b.count();
    ImageBatch out = b;
    out.pixels.array() += 1.0f;
    return out;
  });
  CHECK(stamp_calls == 500);
  CHECK(s25.poisoned_defender_ids.size() == 500);

  // identical plan -> identical id partitions
  Splits s2 = make_splits(big, plan);
  CHECK(s.defender.ids == s2.defender.ids);

  // defender ids are a subset of pretrain ids
  std::set<int64_t> pre(s.pretrain.ids.begin(), s.pretrain.ids.end());
  for (auto id : s.defender.ids) CHECK(pre.count(id) == 1);

  SplitPlan tiny{.clean_ratio = 1e-9, .poison_ratio = 0.0, .seed = 1};
  CHECK_THROWS_AS(make_splits(big, tiny), ConfigError);
}

TEST_CASE("make_splits: downstream halves are disjoint from each other and the defender") {
  SyntheticSpec spec{.seed = 8, .n = 200, .classes = 5, .image_size = 16, .n_test = 100};
  Dataset ds = generate_synthetic(spec);
  SplitPlan plan{.clean_ratio = 0.1, .poison_ratio = 0.0, .seed = 3};
  Splits s = make_splits(ds, plan);
  CHECK(s.down_train.count() == 50);
  CHECK(s.down_test.count() == 50);
  CHECK(s.down_train.labeled());
  std::set<int64_t> train_ids(s.down_train.ids.begin(), s.down_train.ids.end());
  for (auto id : s.down_test.ids) CHECK(train_ids.count(id) == 0);
  for (auto id : s.defender.ids) {
    CHECK(train_ids.count(id) == 0);
    CHECK(id < kTestIdOffset);
  }
}

TEST_CASE("class-balanced defender sampling flag") {
  SyntheticSpec spec{.seed = 12, .n = 400, .classes = 10, .image_size = 16, .n_test = 0};
  Dataset ds = generate_synthetic(spec);
  SplitPlan plan{.clean_ratio = 0.25, .poison_ratio = 0.0, .seed = 4, .class_balanced = true};
  Splits s = make_splits(ds, plan);
  REQUIRE(s.defender.count() == 100);
  std::map<int, int> counts;
  std::map<int64_t, int> label_of;
  for (int i = 0; i < ds.train.count(); ++i) label_of[ds.train.ids[i]] = ds.train.labels[i];
  for (auto id : s.defender.ids) counts[label_of[id]]++;
  for (const auto& [cls, cnt] : counts) CHECK(cnt == 10);
}
