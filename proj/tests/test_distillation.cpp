#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "mimic/dataset.hpp"
#include "mimic/distill.hpp"

using namespace mimic;

namespace {

template <class T>
std::vector<ActBatchT<T>> random_taps(const std::vector<std::array<int, 3>>& shapes, int count,
                                      uint64_t seed) {
  Rng rng(seed);
  std::vector<ActBatchT<T>> taps;
  for (const auto& [c, h, w] : shapes) {
    ActBatchT<T> a;
    a.channels = c;
    a.height = h;
    a.width = w;
    a.count = count;
    a.data.resize(c, count * h * w);
    for (int i = 0; i < a.data.size(); ++i) a.data.data()[i] = T(rng.uniform(-1, 1));
    taps.push_back(std::move(a));
  }
  return taps;
}

PotencyWeights flat_potency(int k, double value = 1.0) {
  PotencyWeights p;
  p.alpha0 = value;
  p.alpha1 = 0.0;
  p.beta.assign(k, value);
  return p;
}

}  // namespace

TEST_CASE("clone loss L0: identical, orthogonal, antipodal") {
  MatD t(3, 1), s(3, 1);
  t << 1, 2, 3;
  s = t;
  CHECK(clone_loss_l0<double>(t, s) == Catch::Approx(0.0).margin(1e-12));
  s << -2, 1, 0;  // orthogonal to t
  CHECK(clone_loss_l0<double>(t, s) == Catch::Approx(1.0).margin(1e-12));
  s = -t;
  CHECK(clone_loss_l0<double>(t, s) == Catch::Approx(2.0).margin(1e-12));
}

TEST_CASE("clone loss L0: zero-norm vector counts as distance 1 and is flagged") {
  MatD t(3, 2), s(3, 2);
  t.col(0) << 1, 0, 0;
  t.col(1) << 0, 1, 0;
  s.col(0) << 1, 0, 0;
  s.col(1).setZero();
  MatD grad;
  int zeros = 0;
  double loss = clone_loss_l0<double>(t, s, &grad, &zeros);
  CHECK(zeros == 1);
  CHECK(loss == Catch::Approx(0.5).margin(1e-12));
  CHECK(grad.col(1).norm() == 0.0);
  CHECK_THROWS_AS(clone_loss_l0<double>(t, MatD::Zero(4, 2)), ContractError);
}

TEST_CASE("clone loss L0 gradient matches finite differences") {
  Rng rng(12);
  MatD t(6, 5), s(6, 5);
  for (int i = 0; i < t.size(); ++i) {
    t.data()[i] = rng.uniform(-1, 1);
    s.data()[i] = rng.uniform(-1, 1);
  }
  MatD grad;
  clone_loss_l0<double>(t, s, &grad);
  const double h = 1e-6;
  double max_rel = 0;
  for (int i = 0; i < s.size(); ++i) {
    MatD sp = s, sm = s;
    sp.data()[i] += h;
    sm.data()[i] -= h;
    double fd = (clone_loss_l0<double>(t, sp) - clone_loss_l0<double>(t, sm)) / (2 * h);
    double denom = std::max(std::abs(fd), std::abs(grad.data()[i]));
    if (denom > 1e-8) max_rel = std::max(max_rel, std::abs(fd - grad.data()[i]) / denom);
  }
  CHECK(max_rel < 1e-4);
}

TEST_CASE("attention loss L2: zero when students equals teacher; linear in beta") {
  auto taps = random_taps<double>({{4, 3, 3}, {8, 2, 2}}, 2, 5);
  CHECK(attention_loss_l2<double>(taps, taps, {1.0, 1.0}, 2) ==
        Catch::Approx(0.0).margin(1e-12));

  auto student = random_taps<double>({{4, 3, 3}, {8, 2, 2}}, 2, 6);
  double base = attention_loss_l2<double>(taps, student, {1.0, 1.0}, 2);
  double doubled = attention_loss_l2<double>(taps, student, {2.0, 2.0}, 2);
  CHECK(doubled == Catch::Approx(2 * base).epsilon(1e-10));
  CHECK(base > 0.0);
}

TEST_CASE("attention loss L2: single-layer worked example = 0.76537") {
  // teacher map [[1,1],[1,1]], student [[1,0],[0,1]], one channel, p=2, beta=1
  ActBatchT<double> t, s;
  t.channels = s.channels = 1;
  t.height = t.width = s.height = s.width = 2;
  t.count = s.count = 1;
  t.data = MatX<double>::Ones(1, 4);
  s.data.resize(1, 4);
  s.data << 1, 0, 0, 1;
  double loss = attention_loss_l2<double>({t}, {s}, {1.0}, 2);
  CHECK(loss == Catch::Approx(0.76537).margin(1e-5));
}

TEST_CASE("attention loss L2: shape mismatch names the layer") {
  auto t = random_taps<double>({{4, 3, 3}, {8, 2, 2}}, 1, 7);
  auto s = random_taps<double>({{4, 3, 3}, {8, 3, 3}}, 1, 8);
  try {
    attention_loss_l2<double>(t, s, {1.0, 1.0}, 2);
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
  }
  CHECK_THROWS_AS(attention_loss_l2<double>(t, t, {1.0}, 2), ContractError);
  CHECK_THROWS_AS(attention_loss_l2<double>(t, t, {1.0, 1.0}, 0), ParameterError);
}

TEST_CASE("attention loss L2 gradient matches finite differences") {
  for (int p : {1, 2, 3}) {
    auto teacher = random_taps<double>({{3, 2, 2}, {5, 2, 2}}, 2, 40 + p);
    auto student = random_taps<double>({{3, 2, 2}, {5, 2, 2}}, 2, 50 + p);
    std::vector<double> beta = {1.3, 0.6};
    std::vector<MatX<double>> grads;
    attention_loss_l2<double>(teacher, student, beta, p, &grads);
    const double h = 1e-6;
    double max_rel = 0;
    for (size_t l = 0; l < student.size(); ++l) {
      for (int i = 0; i < student[l].data.size(); ++i) {
        auto sp = student, sm = student;
        sp[l].data.data()[i] += h;
        sm[l].data.data()[i] -= h;
        double fd = (attention_loss_l2<double>(teacher, sp, beta, p) -
                     attention_loss_l2<double>(teacher, sm, beta, p)) /
                    (2 * h);
        double an = grads[l].data()[i];
        double denom = std::max(std::abs(fd), std::abs(an));
        if (denom > 1e-7) max_rel = std::max(max_rel, std::abs(fd - an) / denom);
      }
    }
    INFO("p = " << p);
    CHECK(max_rel < 1e-4);
  }
}

TEST_CASE("total_loss: student == teacher with lambdas off gives exactly zero") {
  SyntheticSpec spec{.seed = 31, .n = 8, .classes = 2, .image_size = 16};
  Dataset ds = generate_synthetic(spec);
  EncoderState teacher = init_random("conv4_tiny", 60, 32);
  DefenseConfig cfg;
  cfg.lambda1 = 0;
  cfg.lambda2 = 0;
  cfg.potency = flat_potency(4);
  LossBreakdown lb = total_loss(ds.train.without_labels(), teacher, teacher, cfg, 1);
  CHECK(lb.l0 == Catch::Approx(0.0).margin(1e-6));
  CHECK(lb.total == Catch::Approx(0.0).margin(1e-6));
}

TEST_CASE("total_loss: breakdown sums to total within 1e-6 and is non-negative") {
  SyntheticSpec spec{.seed = 32, .n = 8, .classes = 2, .image_size = 16};
  Dataset ds = generate_synthetic(spec);
  EncoderState teacher = init_random("conv4_tiny", 61, 32);
  EncoderState student = init_random("conv4_tiny", 62, 32);
  DefenseConfig cfg;
  cfg.lambda1 = 0.7;
  cfg.lambda2 = 450.0;
  cfg.potency = flat_potency(4, 1.2);
  LossBreakdown lb = total_loss(ds.train.without_labels(), teacher, student, cfg, 2);
  CHECK(lb.l0 >= 0);
  CHECK(lb.l1 >= 0);
  CHECK(lb.l2 >= 0);
  CHECK(lb.total ==
        Catch::Approx(lb.l0 + cfg.lambda1 * lb.l1 + cfg.lambda2 * lb.l2).margin(1e-6));
  CHECK(lb.total >= 0);
}

TEST_CASE("total_loss end-to-end gradient matches finite differences on student params") {
  SyntheticSpec spec{.seed = 33, .n = 4, .classes = 2, .image_size = 16};
  Dataset ds = generate_synthetic(spec);
  ImageBatch batch = ds.train.without_labels();
  EncoderState teacher = init_random("conv4_tiny", 63, 16);
  EncoderState student = init_random("conv4_tiny", 64, 16);
  DefenseConfig cfg;
  cfg.lambda1 = 0.5;
  cfg.lambda2 = 10.0;
  cfg.potency = flat_potency(4, 1.1);
  cfg.aug = AugmentConfig::identity();

  // train_mode=false uses running statistics, train_mode=true the batch ones;
  // both backward paths must agree with finite differences. The train-mode
  // loss value is a pure function of (params, batch), so FD evaluations use a
  // scratch copy whose drifting running stats cannot leak into the value.
  for (bool train_mode : {false, true}) {
    EncoderGrads grads = EncoderGrads::zero_like(student);
    auto eval_loss = [&](EncoderState& s, EncoderGrads* g) {
      if (!train_mode) return total_loss(batch, teacher, s, cfg, 3, g).total;
      EncoderState scratch = s;
      return total_loss(batch, teacher, scratch, cfg, 3, g, &scratch).total;
    };
    eval_loss(student, &grads);

    // float forward limits attainable agreement; probe a few params per block
    Rng rng(9);
    auto gparams = grads.params();
    auto sparams = student.params();
    const float h = 2e-3f;
    for (size_t b = 0; b < sparams.size(); ++b) {
      if (sparams[b].name.find("weight") == std::string::npos) continue;
      for (int probe = 0; probe < 2; ++probe) {
        int64_t i = rng.uniform_int(int(sparams[b].size));
        float keep = sparams[b].data[i];
        sparams[b].data[i] = keep + h;
        double up = eval_loss(student, nullptr);
        sparams[b].data[i] = keep - h;
        double dn = eval_loss(student, nullptr);
        sparams[b].data[i] = keep;
        double fd = (up - dn) / (2 * h);
        double an = gparams[b].data[i];
        double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
        INFO(sparams[b].name << "[" << i << "] train=" << train_mode << " fd=" << fd
                             << " an=" << an);
        CHECK(std::abs(fd - an) / denom < 0.08);
      }
    }
  }
}

TEST_CASE("total_loss: potency/teacher mismatch is a config error") {
  SyntheticSpec spec{.seed = 34, .n = 4, .classes = 2, .image_size = 16};
  Dataset ds = generate_synthetic(spec);
  EncoderState teacher = init_random("conv4_tiny", 65, 32);
  DefenseConfig cfg;
  cfg.potency = flat_potency(3);  // teacher has 4 taps
  CHECK_THROWS_AS(total_loss(ds.train.without_labels(), teacher, teacher, cfg, 1), ConfigError);
}

TEST_CASE("distill: 0 epochs returns the untouched random student; teacher immutable") {
  SyntheticSpec spec{.seed = 35, .n = 16, .classes = 2, .image_size = 16};
  Dataset ds = generate_synthetic(spec);
  EncoderState teacher = init_random("conv4_tiny", 66, 32);
  EncoderState teacher_copy = teacher;
  DefenseConfig cfg;
  cfg.epochs = 0;
  cfg.potency = flat_potency(4);
  cfg.seed = 5;
  EncoderState student = distill(teacher, ds.train.without_labels(), cfg);

  EncoderState expect = init_random("conv4_tiny", derive_seed(5, "student-init"), 32);
  auto ps = student.params(), pe = expect.params();
  for (size_t i = 0; i < ps.size(); ++i)
    REQUIRE(std::memcmp(ps[i].data, pe[i].data, sizeof(float) * ps[i].size) == 0);

  auto pt = teacher.params(), pc = teacher_copy.params();
  for (size_t i = 0; i < pt.size(); ++i)
    REQUIRE(std::memcmp(pt[i].data, pc[i].data, sizeof(float) * pt[i].size) == 0);
}

TEST_CASE("distill: short run is deterministic, reduces loss, never copies teacher weights") {
  SyntheticSpec spec{.seed = 36, .n = 24, .classes = 3, .image_size = 16};
  Dataset ds = generate_synthetic(spec);
  EncoderState teacher = init_random("conv4_tiny", 67, 32);
  EncoderState teacher_copy = teacher;
  DefenseConfig cfg;
  cfg.epochs = 4;
  cfg.batch = 12;
  cfg.learning_rate = 0.02;
  cfg.lambda2 = 100.0;
  cfg.potency = flat_potency(4);
  cfg.seed = 6;

  EncoderState s1 = distill(teacher, ds.train.without_labels(), cfg);
  EncoderState s2 = distill(teacher, ds.train.without_labels(), cfg);
  auto p1 = s1.params(), p2 = s2.params();
  for (size_t i = 0; i < p1.size(); ++i)
    REQUIRE(std::memcmp(p1[i].data, p2[i].data, sizeof(float) * p1[i].size) == 0);

  // teacher untouched by training
  auto pt = teacher.params(), pc = teacher_copy.params();
  for (size_t i = 0; i < pt.size(); ++i)
    REQUIRE(std::memcmp(pt[i].data, pc[i].data, sizeof(float) * pt[i].size) == 0);

  // the student moved toward the teacher function on the clean set
  TapsBatch tf = forward_with_taps(teacher, ds.train.without_labels());
  TapsBatch s0f = forward_with_taps(init_random("conv4_tiny", derive_seed(6, "student-init"), 32),
                                    ds.train.without_labels());
  TapsBatch s1f = forward_with_taps(s1, ds.train.without_labels());
  double before = clone_loss_l0<float>(tf.features, s0f.features);
  double after = clone_loss_l0<float>(tf.features, s1f.features);
  CHECK(after < before);

  DefenseConfig bad = cfg;
  bad.potency = flat_potency(2);
  CHECK_THROWS_AS(distill(teacher, ds.train.without_labels(), bad), ConfigError);
}

TEST_CASE("student initial parameters are uncorrelated with the teacher's") {
  EncoderState teacher = init_random("conv4_tiny", 68, 32);
  EncoderState student = init_random("conv4_tiny", derive_seed(99, "student-init"), 32);
  auto pt = teacher.params(), ps = student.params();
  double dot = 0, nt = 0, ns = 0;
  for (size_t i = 0; i < pt.size(); ++i)
    for (int64_t k = 0; k < pt[i].size; ++k) {
      dot += double(pt[i].data[k]) * ps[i].data[k];
      nt += double(pt[i].data[k]) * pt[i].data[k];
      ns += double(ps[i].data[k]) * ps[i].data[k];
    }
  double corr = dot / std::sqrt(nt * ns);
  CHECK(std::abs(corr) < 0.05);  // independent random draws
}

TEST_CASE("finetune_baseline: 0 epochs returns the teacher unchanged") {
  SyntheticSpec spec{.seed = 37, .n = 8, .classes = 2, .image_size = 16};
  Dataset ds = generate_synthetic(spec);
  EncoderState teacher = init_random("conv4_tiny", 70, 32);
  EncoderState tuned = finetune_baseline(teacher, ds.train.without_labels(), 0, 0.01, 1);
  auto pa = teacher.params(), pb = tuned.params();
  for (size_t i = 0; i < pa.size(); ++i)
    REQUIRE(std::memcmp(pa[i].data, pb[i].data, sizeof(float) * pa[i].size) == 0);
}
