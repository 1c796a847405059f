#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mimic/common.hpp"
#include "mimic/encoder.hpp"
#include "mimic/image.hpp"
#include "mimic/metrics.hpp"
#include "mimic/mine.hpp"
#include "mimic/optimizer.hpp"
#include "mimic/trigger.hpp"

namespace mimic {

enum class AttackMode { model_poison, data_poison, adaptive };

inline std::string attack_mode_name(AttackMode m) {
  switch (m) {
    case AttackMode::model_poison: return "model_poison";
    case AttackMode::data_poison: return "data_poison";
    case AttackMode::adaptive: return "adaptive";
  }
  return "unknown";
}

inline AttackMode attack_mode_from(const std::string& s) {
  if (s == "model_poison") return AttackMode::model_poison;
  if (s == "data_poison") return AttackMode::data_poison;
  if (s == "adaptive") return AttackMode::adaptive;
  throw ConfigError("unknown attack mode: " + s);
}

struct AttackConfig {
  AttackMode mode = AttackMode::model_poison;
  TriggerSpec trigger;
  int epochs = 12;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double utility_weight = 2.0;
  double adaptive_weight = 0.0;
  int adaptive_refresh_epochs = 2;  // retrain MI estimators every this many epochs
  MineConfig adaptive_mine{.steps = 400, .width = 64, .batch = 128};
  int batch = 64;
  uint64_t seed = 0;

  void validate() const {
    if (adaptive_weight > 0 && mode != AttackMode::adaptive)
      throw ConfigError("adaptive_weight > 0 requires mode=adaptive");
    if (utility_weight < 0) throw ParameterError("utility_weight must be >= 0");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
  }
};

namespace detail {

// Mean cosine similarity between paired columns, with gradient w.r.t. f.
inline double mean_cosine(const MatF& f, const MatF& r, MatF* grad_f = nullptr) {
  const int B = int(f.cols());
  if (grad_f) grad_f->setZero(f.rows(), B);
  double total = 0;
  for (int i = 0; i < B; ++i) {
    float fn = f.col(i).norm(), rn = r.col(i).norm();
    if (fn == 0 || rn == 0) continue;
    VecF fh = f.col(i) / fn, rh = r.col(i) / rn;
    float c = fh.dot(rh);
    total += c;
    if (grad_f) grad_f->col(i) = (rh - c * fh) / fn / float(B);
  }
  return total / B;
}

inline int find_reference_index(const ImageBatch& shadow, int target_class) {
  if (!shadow.labeled()) throw ContractError("shadow set must be labeled to pick a reference");
  int best = -1;
  for (int i = 0; i < shadow.count(); ++i) {
    if (shadow.labels[i] != target_class) continue;
    if (best < 0 || shadow.ids[i] < shadow.ids[best]) best = i;
  }
  if (best < 0)
    throw ConfigError("no image of target class " + std::to_string(target_class) +
                      " in the shadow set");
  return best;
}

// Accumulates encoder gradients of per-layer c_l * E_batch[T_l(pool(A^l), z)]
// through frozen statistics networks (the differentiable surrogate of the
// adaptive MI regularizer).
inline void accumulate_mi_reg_signals(const std::vector<MineEstimator>& nets,
                                      const std::vector<double>& coeff, const TapsBatchT<float>& fwd,
                                      BackSignalsT<float>& sig) {
  const int K = int(nets.size());
  const int B = fwd.count();
  if (sig.d_taps.empty()) sig.d_taps.resize(K);
  for (int l = 0; l < K; ++l) {
    if (coeff[l] == 0) continue;
    const auto& tap = fwd.taps[l];
    const int S = tap.spatial();
    MatF pooled(tap.channels, B);
    for (int b = 0; b < B; ++b) pooled.col(b) = tap.image(b).rowwise().mean();

    auto f = mine_forward(nets[l], pooled, fwd.embeddings);
    MineGrads mg = MineGrads::zero_like(nets[l]);
    MatF d_x;
    VecF d_t = VecF::Constant(B, float(coeff[l] / B));
    mine_backward(nets[l], f, d_t, mg, &d_x);

    MatF d_tap = MatF::Zero(tap.channels, B * S);
    for (int b = 0; b < B; ++b)
      d_tap.middleCols(b * S, S).colwise() = VecF(d_x.col(b).head(tap.channels) / float(S));
    if (sig.d_taps[l].size() == 0)
      sig.d_taps[l] = std::move(d_tap);
    else
      sig.d_taps[l] += d_tap;

    MatF d_emb = d_x.bottomRows(f.x.rows() - tap.channels);
    if (sig.d_embeddings.size() == 0)
      sig.d_embeddings = std::move(d_emb);
    else
      sig.d_embeddings += d_emb;
  }
}

}  // namespace detail

struct AttackResult {
  EncoderState enc;
  bool utility_collapse = false;            // mean clean similarity dropped below 0.5
  std::vector<double> effectiveness_curve;  // per-epoch mean cos(triggered, reference)
  std::vector<double> utility_curve;        // per-epoch mean cos(clean vs original)
  int64_t reference_image_id = -1;
};

/// BadEncoder-style model poisoning: drive embeddings of trigger-stamped
/// inputs toward the (frozen) clean-encoder embedding of a reference image of
/// the target class, while utility_weight * (clean-input similarity) holds
/// clean behavior in place. mode=adaptive adds the MI-profile regularizer.
inline AttackResult model_poison(const EncoderState& clean_enc, const ImageBatch& shadow,
                                 const AttackConfig& cfg, MetricsWriter* metrics = nullptr) {
  cfg.validate();
  AttackResult res;
  res.enc = clean_enc;
  const int ref_idx = detail::find_reference_index(shadow, cfg.trigger.target_class);
  res.reference_image_id = shadow.ids[ref_idx];
  if (cfg.epochs == 0) return res;

  VecF ref_emb;
  {
    TapsBatch fwd = forward_with_taps(clean_enc, shadow.select({ref_idx}));
    ref_emb = fwd.features.col(0);
  }

  const bool adaptive = cfg.mode == AttackMode::adaptive && cfg.adaptive_weight > 0;
  const int K = res.enc.num_stages();
  std::vector<MineEstimator> mi_clean, mi_trig;
  std::vector<double> reg_coeff(K, 0.0);  // 2 * weight * (DV_trig - DV_clean) per layer

  Sgd opt(cfg.momentum, 0.0);
  EncoderGrads grads = EncoderGrads::zero_like(res.enc);
  ForwardCache cache_eff, cache_util;
  Rng order_rng(derive_seed(cfg.seed, "attack-order"));
  const int n = shadow.count();
  const int batch = std::min(cfg.batch, n);
  const int steps_per_epoch = std::max(1, n / batch);
  const int64_t total_steps = int64_t(cfg.epochs) * steps_per_epoch;
  int64_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (adaptive && epoch % std::max(1, cfg.adaptive_refresh_epochs) == 0) {
      mi_clean.clear();
      mi_trig.clear();
      PooledActivations pc = harvest_pooled(res.enc, shadow);
      PooledActivations pt = harvest_pooled(res.enc, stamp_trigger(shadow, cfg.trigger));
      for (int l = 0; l < K; ++l) {
        MineConfig mc = cfg.adaptive_mine;
        mc.seed = derive_seed(cfg.seed, "adaptive-mine-clean", uint64_t(epoch) * 16 + l);
        MineResult rc = mine_train(pc.pooled[l], pc.embeddings, mc);
        mc.seed = derive_seed(cfg.seed, "adaptive-mine-trig", uint64_t(epoch) * 16 + l);
        MineResult rt = mine_train(pt.pooled[l], pt.embeddings, mc);
        reg_coeff[l] = 2.0 * cfg.adaptive_weight * (rt.estimate - rc.estimate);
        mi_clean.push_back(std::move(rc.net));
        mi_trig.push_back(std::move(rt.net));
      }
      if (metrics) {
        nlohmann::json coeffs = reg_coeff;
        metrics->write({{"kind", "adaptive_mi_gap"}, {"epoch", epoch}, {"coeff", coeffs}});
      }
    }

    std::vector<int> perm = order_rng.permutation(n);
    double eff_sum = 0, util_sum = 0;
    for (int s = 0; s < steps_per_epoch; ++s, ++step) {
      std::vector<int> idx(perm.begin() + s * batch, perm.begin() + s * batch + batch);
      ImageBatch clean_batch = shadow.select(idx);
      ImageBatch trig_batch = stamp_trigger(clean_batch, cfg.trigger);
      grads.set_zero();

      {  // effectiveness (+ triggered side of the MI regularizer)
        // eval-mode forward: fine-tuning optimizes the deployed (running-stat)
        // function, and the clean encoder's statistics stay frozen
        ForwardCache& cache = cache_eff;
        TapsBatch fwd = forward_with_taps(res.enc, trig_batch, &cache);
        MatF ref_cols(ref_emb.size(), batch);
        ref_cols.colwise() = ref_emb;
        MatF d_feat;
        eff_sum += detail::mean_cosine(fwd.features, ref_cols, &d_feat);
        BackSignals sig;
        sig.d_features = -d_feat;  // ascend on similarity
        if (adaptive) detail::accumulate_mi_reg_signals(mi_trig, reg_coeff, fwd, sig);
        encoder_backward(res.enc, trig_batch, fwd, cache, sig, grads);
      }

      {  // utility (+ clean side of the MI regularizer, opposite sign)
        TapsBatch clean_ref = forward_with_taps(clean_enc, clean_batch);
        ForwardCache& cache = cache_util;
        TapsBatch fwd = forward_with_taps(res.enc, clean_batch, &cache);
        MatF d_feat;
        util_sum += detail::mean_cosine(fwd.features, clean_ref.features, &d_feat);
        BackSignals sig;
        sig.d_features = -float(cfg.utility_weight) * d_feat;
        if (adaptive) {
          std::vector<double> neg(reg_coeff.size());
          for (size_t l = 0; l < reg_coeff.size(); ++l) neg[l] = -reg_coeff[l];
          detail::accumulate_mi_reg_signals(mi_clean, neg, fwd, sig);
        }
        encoder_backward(res.enc, clean_batch, fwd, cache, sig, grads);
      }

      opt.step(res.enc.params(), grads.params(), cosine_lr(cfg.learning_rate, step, total_steps));
    }
    res.effectiveness_curve.push_back(eff_sum / steps_per_epoch);
    res.utility_curve.push_back(util_sum / steps_per_epoch);
    if (metrics)
      metrics->write({{"kind", "attack_epoch"},
                      {"epoch", epoch},
                      {"effectiveness", res.effectiveness_curve.back()},
                      {"utility", res.utility_curve.back()}});
  }

  if (!res.utility_curve.empty() && res.utility_curve.back() < 0.5) {
    res.utility_collapse = true;
    if (metrics)
      metrics->write({{"kind", "warning"},
                      {"code", "utility_collapse"},
                      {"mean_clean_similarity", res.utility_curve.back()}});
  }
  return res;
}

/// RQ3.4 adaptive attack: model poisoning plus the MI-profile regularizer.
inline AttackResult adaptive_poison(const EncoderState& clean_enc, const ImageBatch& shadow,
                                    AttackConfig cfg, MetricsWriter* metrics = nullptr) {
  cfg.mode = AttackMode::adaptive;
  return model_poison(clean_enc, shadow, cfg, metrics);
}

/// Simplified BASSL-style data poisoning: stamp the trigger on a fraction of
/// the target-class images; pretraining then proceeds normally on the result.
/// Sample ids are retained.
inline ImageBatch data_poison(const ImageBatch& labeled_train, const TriggerSpec& trig,
                              double fraction, std::vector<int64_t>* stamped_ids = nullptr) {
  if (fraction < 0.0 || fraction > 1.0) throw ParameterError("fraction must be in [0,1]");
  if (!labeled_train.labeled()) throw ContractError("data_poison needs a labeled training set");
  std::vector<int> targets;
  for (int i = 0; i < labeled_train.count(); ++i)
    if (labeled_train.labels[i] == trig.target_class) targets.push_back(i);
  if (targets.empty())
    throw ConfigError("no images of target class " + std::to_string(trig.target_class));

  ImageBatch out = labeled_train;
  const int n_stamp = int(std::lround(fraction * double(targets.size())));
  if (n_stamp == 0) return out;
  ImageBatch sub =
      labeled_train.select(std::vector<int>(targets.begin(), targets.begin() + n_stamp));
  ImageBatch stamped = stamp_trigger(sub, trig);
  for (int k = 0; k < n_stamp; ++k) {
    out.pixels.col(targets[k]) = stamped.pixels.col(k);
    if (stamped_ids) stamped_ids->push_back(stamped.ids[k]);
  }
  return out;
}

}  // namespace mimic
