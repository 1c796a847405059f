#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mimic/augment.hpp"
#include "mimic/common.hpp"
#include "mimic/contrastive.hpp"
#include "mimic/encoder.hpp"
#include "mimic/metrics.hpp"
#include "mimic/mine.hpp"
#include "mimic/optimizer.hpp"

namespace mimic {

// ---------------------------------------------------------------------------
// Clone loss L0: mean cosine distance 1 - cos(F(x), F'(x)) between teacher and
// student features. A zero-norm vector counts as distance 1 (orthogonal
// convention) with zero gradient, and is reported through zero_norm_count.
// ---------------------------------------------------------------------------

template <class T>
inline T clone_loss_l0(const MatX<T>& teacher_feats, const MatX<T>& student_feats,
                       MatX<T>* grad_student = nullptr, int* zero_norm_count = nullptr) {
  if (teacher_feats.rows() != student_feats.rows() ||
      teacher_feats.cols() != student_feats.cols())
    throw ContractError("clone_loss_l0: feature shape mismatch");
  const int B = int(teacher_feats.cols());
  if (B == 0) throw ContractError("clone_loss_l0: empty batch");

  if (grad_student) grad_student->setZero(student_feats.rows(), B);
  int zeros = 0;
  T loss = T(0);
  for (int i = 0; i < B; ++i) {
    T tn = teacher_feats.col(i).norm();
    T sn = student_feats.col(i).norm();
    if (tn == T(0) || sn == T(0)) {
      ++zeros;
      loss += T(1);
      continue;
    }
    VecX<T> th = teacher_feats.col(i) / tn;
    VecX<T> sh = student_feats.col(i) / sn;
    T c = th.dot(sh);
    loss += T(1) - c;
    if (grad_student) grad_student->col(i) = -(th - c * sh) / sn / T(B);
  }
  if (zero_norm_count) *zero_norm_count = zeros;
  return loss / T(B);
}

// ---------------------------------------------------------------------------
// Attention loss L2: per layer, the beta-weighted batch-mean L2 distance
// between spatially-flattened, L2-normalized attention maps of teacher and
// student (attention operator AT(A)[h,w] = sum_c |A_c[h,w]|^p).
// Norms are epsilon-guarded; an exactly all-zero map gets zero gradient.
// ---------------------------------------------------------------------------

inline constexpr double kAttentionNormEps = 1e-8;

template <class T>
inline T attention_loss_l2(const std::vector<ActBatchT<T>>& teacher_taps,
                           const std::vector<ActBatchT<T>>& student_taps,
                           const std::vector<double>& beta, int p,
                           std::vector<MatX<T>>* grad_taps = nullptr) {
  if (teacher_taps.size() != student_taps.size())
    throw ContractError("attention_loss_l2: tap count mismatch");
  if (beta.size() != teacher_taps.size())
    throw ContractError("attention_loss_l2: potency length mismatch");
  if (p < 1) throw ParameterError("attention order p must be >= 1");

  const int K = int(teacher_taps.size());
  if (grad_taps) grad_taps->assign(K, MatX<T>());

  T total = T(0);
  for (int l = 0; l < K; ++l) {
    const auto& tt = teacher_taps[l];
    const auto& st = student_taps[l];
    if (tt.channels != st.channels || tt.height != st.height || tt.width != st.width ||
        tt.count != st.count)
      throw ContractError("attention_loss_l2: tap shape mismatch at layer " + std::to_string(l));
    const int B = tt.count, S = tt.spatial();
    if (grad_taps) (*grad_taps)[l] = MatX<T>::Zero(st.channels, B * S);

    T layer_loss = T(0);
    for (int b = 0; b < B; ++b) {
      auto t_act = tt.data.middleCols(b * S, S);
      auto s_act = st.data.middleCols(b * S, S);
      RowVecX<T> vt = attention_rows<T>(MatX<T>(t_act), p);
      RowVecX<T> vs = attention_rows<T>(MatX<T>(s_act), p);
      T nt = vt.norm(), ns = vs.norm();
      RowVecX<T> ut = vt / (nt + T(kAttentionNormEps));
      RowVecX<T> us = vs / (ns + T(kAttentionNormEps));
      RowVecX<T> diff = ut - us;
      T dist = diff.norm();
      layer_loss += dist;

      if (grad_taps && dist > T(0) && ns > T(0)) {
        // d dist / d us = -diff/dist; through us = vs/(ns+eps):
        RowVecX<T> w = -diff / dist;
        RowVecX<T> d_vs =
            w / (ns + T(kAttentionNormEps)) -
            vs * (vs.dot(w) / (ns * (ns + T(kAttentionNormEps)) * (ns + T(kAttentionNormEps))));
        // through AT: dAT/dA[c,s] = p*|A|^{p-1}*sign(A)
        auto g = (*grad_taps)[l].middleCols(b * S, S);
        const T scale = T(beta[l]) / T(B);
        for (int s = 0; s < S; ++s) {
          T dv = d_vs(s) * scale;
          for (int c = 0; c < st.channels; ++c) {
            T a = s_act(c, s);
            T da;
            if (p == 1)
              da = a > T(0) ? T(1) : (a < T(0) ? T(-1) : T(0));
            else if (p == 2)
              da = T(2) * a;
            else
              da = T(p) * std::pow(std::abs(a), T(p - 1)) * (a > T(0) ? T(1) : (a < T(0) ? T(-1) : T(0)));
            g(c, s) += dv * da;
          }
        }
      }
    }
    total += T(beta[l]) * layer_loss / T(B);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Total objective: L = L0 + lambda1*L1 + lambda2*L2 (Eq. 8 shape), with L0/L2
// on the un-augmented view and L1 the student-side infoNCE on two views.
// ---------------------------------------------------------------------------

struct DefenseConfig {
  double lambda1 = 1.0;
  double lambda2 = 2000.0;
  int p = 2;
  double temperature = 0.5;
  int epochs = 120;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::string optimizer = "adam";  // loss terms span orders of magnitude
  int batch = 64;
  uint64_t seed = 0;
  AugmentConfig aug;
  PotencyWeights potency;
  bool use_l0 = true;        // ablation switches
  bool use_l1 = true;
  bool clone_projected = false;  // L0 on projected z instead of F(x)

  void validate() const {
    if (!(lambda1 >= 0) || !std::isfinite(lambda1)) throw ParameterError("lambda1 must be finite and >= 0");
    if (!(lambda2 >= 0) || !std::isfinite(lambda2)) throw ParameterError("lambda2 must be finite and >= 0");
    if (p < 1) throw ParameterError("attention order p must be >= 1");
    if (temperature <= 0) throw ParameterError("temperature must be positive");
  }
};

struct LossBreakdown {
  double l0 = 0, l1 = 0, l2 = 0, total = 0;
  int zero_norm_count = 0;
};

struct DistillScratch {
  ForwardCache canonical;
  ForwardCache views;
};

/// Evaluates the full objective on one batch (no parameter update unless a
/// mutable student is given, in which case its forwards run in train mode and
/// update the student's normalization statistics). Used by the training loop
/// and directly testable.
inline LossBreakdown total_loss(const ImageBatch& batch, const EncoderState& teacher,
                                const EncoderState& student, const DefenseConfig& cfg,
                                uint64_t view_seed, EncoderGrads* grads = nullptr,
                                EncoderState* mutable_student = nullptr,
                                DistillScratch* scratch = nullptr) {
  DistillScratch local_scratch;
  DistillScratch& ws = scratch ? *scratch : local_scratch;
  cfg.validate();
  if (int(cfg.potency.beta.size()) != teacher.num_stages())
    throw ConfigError("potency length " + std::to_string(cfg.potency.beta.size()) +
                      " does not match teacher taps " + std::to_string(teacher.num_stages()));
  if (!student.same_shape_as(teacher))
    throw ConfigError("student/teacher architecture mismatch");

  LossBreakdown out;
  // Teacher targets under batch statistics so both sides of L0/L2 share one
  // normalization semantics; the student can then drive the residual to zero.
  TapsBatch t_fwd =
      mutable_student ? forward_batch_stats(teacher, batch) : forward_with_taps(teacher, batch);

  // canonical view: L0 on features, L2 on attention maps
  ForwardCache& s_cache = ws.canonical;
  TapsBatch s_fwd = mutable_student ? forward_train(*mutable_student, batch, &s_cache)
                                    : forward_with_taps(student, batch, &s_cache);
  BackSignals sig;
  if (cfg.use_l0) {
    MatF d_feat;
    const MatF& t_ref = cfg.clone_projected ? t_fwd.embeddings : t_fwd.features;
    const MatF& s_ref = cfg.clone_projected ? s_fwd.embeddings : s_fwd.features;
    out.l0 = clone_loss_l0<float>(t_ref, s_ref, grads ? &d_feat : nullptr, &out.zero_norm_count);
    if (grads) {
      if (cfg.clone_projected)
        sig.d_embeddings = std::move(d_feat);
      else
        sig.d_features = std::move(d_feat);
    }
  }
  if (cfg.lambda2 > 0) {
    std::vector<MatF> d_taps;
    out.l2 = attention_loss_l2<float>(t_fwd.taps, s_fwd.taps, cfg.potency.beta, cfg.p,
                                      grads ? &d_taps : nullptr);
    if (grads) {
      sig.d_taps = std::move(d_taps);
      for (auto& g : sig.d_taps) g *= float(cfg.lambda2);
    }
  }
  if (grads && (sig.d_embeddings.size() || sig.d_features.size() || !sig.d_taps.empty()))
    encoder_backward(student, batch, s_fwd, s_cache, sig, *grads);

  // augmented views: L1 (student-side contrastive)
  if (cfg.use_l1 && cfg.lambda1 > 0) {
    auto [va, vb] = augment_pair(batch, cfg.aug, view_seed);
    ImageBatch joined;
    joined.height = va.height;
    joined.width = va.width;
    const int n = va.count();
    joined.pixels.resize(va.pixels.rows(), 2 * n);
    joined.ids.resize(2 * n);
    for (int i = 0; i < n; ++i) {
      joined.pixels.col(2 * i) = va.pixels.col(i);
      joined.pixels.col(2 * i + 1) = vb.pixels.col(i);
      joined.ids[2 * i] = va.ids[i];
      joined.ids[2 * i + 1] = vb.ids[i];
    }
    ForwardCache& v_cache = ws.views;
    TapsBatch v_fwd = mutable_student ? forward_train(*mutable_student, joined, &v_cache)
                                      : forward_with_taps(student, joined, grads ? &v_cache : nullptr);
    MatF d_z;
    out.l1 = info_nce_loss<float>(v_fwd.embeddings, adjacent_pairing(2 * n),
                                  float(cfg.temperature), grads ? &d_z : nullptr);
    if (grads) {
      BackSignals vsig;
      vsig.d_embeddings = d_z * float(cfg.lambda1);
      encoder_backward(student, joined, v_fwd, v_cache, vsig, *grads);
    }
  }

  out.total = out.l0 + cfg.lambda1 * out.l1 + cfg.lambda2 * out.l2;
  if (!std::isfinite(out.total)) {
    std::string term = !std::isfinite(out.l0) ? "L0" : !std::isfinite(out.l1) ? "L1" : "L2";
    throw NumericError("non-finite distillation term " + term);
  }
  return out;
}

// ---------------------------------------------------------------------------
// MIMIC distillation: random-init student, frozen teacher, gradient descent on
// the total objective over the defender's clean set.
// ---------------------------------------------------------------------------

inline EncoderState distill(const EncoderState& teacher, const ImageBatch& clean_set,
                            const DefenseConfig& cfg, MetricsWriter* metrics = nullptr) {
  cfg.validate();
  if (int(cfg.potency.beta.size()) != teacher.num_stages())
    throw ConfigError("potency weights do not match teacher tap count");

  EncoderState student =
      init_random(teacher.arch_id, derive_seed(cfg.seed, "student-init"), teacher.feature_dim);
  const int n = clean_set.count();
  if (n == 0) throw ContractError("distill: empty clean set");

  const bool use_adam = cfg.optimizer == "adam";
  if (!use_adam && cfg.optimizer != "sgd")
    throw ConfigError("unknown defense optimizer: " + cfg.optimizer);
  Sgd sgd(cfg.momentum, cfg.weight_decay);
  Adam adam(cfg.learning_rate);
  EncoderGrads grads = EncoderGrads::zero_like(student);
  DistillScratch scratch;
  Rng order_rng(derive_seed(cfg.seed, "epoch-order"));
  const int batch = std::min(cfg.batch, n);
  const int steps_per_epoch = std::max(1, n / batch);
  const int64_t total_steps = int64_t(cfg.epochs) * steps_per_epoch;
  int64_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> perm = order_rng.permutation(n);
    for (int s = 0; s < steps_per_epoch; ++s, ++step) {
      std::vector<int> idx(perm.begin() + s * batch, perm.begin() + s * batch + batch);
      ImageBatch sub = clean_set.select(idx);
      grads.set_zero();
      LossBreakdown lb = total_loss(sub, teacher, student, cfg,
                                    derive_seed(cfg.seed, "views", step), &grads, &student,
                                    &scratch);
      if (use_adam) {
        // weight decay folded into the gradient (Adam has no decoupled decay here)
        auto ps = student.params();
        auto gs = grads.params();
        for (size_t i = 0; i < ps.size(); ++i)
          for (int64_t k = 0; k < ps[i].size; ++k)
            gs[i].data[k] += float(cfg.weight_decay) * ps[i].data[k];
        adam.step(ps, gs);
      } else {
        sgd.step(student.params(), grads.params(),
                 cosine_lr(cfg.learning_rate, step, total_steps));
      }
      if (metrics)
        metrics->write({{"kind", "distill_loss"},
                        {"step", step},
                        {"L0", lb.l0},
                        {"L1", lb.l1},
                        {"L2", lb.l2},
                        {"total", lb.total},
                        {"zero_norm", lb.zero_norm_count}});
    }
  }
  return student;
}

/// FT baseline: plain contrastive fine-tuning of the teacher's own weights on
/// the clean set (no clone or attention terms).
inline EncoderState finetune_baseline(const EncoderState& teacher, const ImageBatch& clean_set,
                                      int epochs, double learning_rate, uint64_t seed,
                                      double temperature = 0.5, int batch_pairs = 64,
                                      MetricsWriter* metrics = nullptr) {
  ContrastiveConfig cfg;
  cfg.temperature = temperature;
  cfg.batch_pairs = batch_pairs;
  cfg.epochs = epochs;
  cfg.learning_rate = learning_rate;
  cfg.seed = seed;
  if (epochs == 0) return teacher;
  PretrainResult res = pretrain(teacher, clean_set, cfg, metrics);
  return std::move(res.enc);
}

}  // namespace mimic
