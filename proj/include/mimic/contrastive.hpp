#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "mimic/augment.hpp"
#include "mimic/common.hpp"
#include "mimic/encoder.hpp"
#include "mimic/metrics.hpp"
#include "mimic/optimizer.hpp"
#include "mimic/rng.hpp"

namespace mimic {

// ---------------------------------------------------------------------------
// infoNCE. Embeddings are L2-normalized inside the loss, so sim() is cosine
// similarity. The denominator runs over every k != i, including k = j.
// ---------------------------------------------------------------------------

/// Default pairing for a [a0,b0,a1,b1,...] layout: views 2k and 2k+1 are the
/// positive pair.
inline std::vector<int> adjacent_pairing(int n_views) {
  std::vector<int> partner(n_views);
  for (int i = 0; i < n_views; ++i) partner[i] = i ^ 1;
  return partner;
}

/// Mean over all 2N anchors of -log( exp(sim(z_i,z_j)/tau) /
/// sum_{k != i} exp(sim(z_i,z_k)/tau) ). Optionally emits dLoss/dEmbeddings.
template <class T>
inline T info_nce_loss(const MatX<T>& embeddings, const std::vector<int>& pairing, T tau,
                       MatX<T>* grad_out = nullptr) {
  const int M = int(embeddings.cols());
  if (tau <= T(0)) throw ParameterError("temperature must be positive");
  if (M < 2) throw ContractError("info_nce_loss needs at least 2 views");
  if (int(pairing.size()) != M) throw ContractError("pairing size mismatch");
  for (int i = 0; i < M; ++i) {
    if (pairing[i] < 0 || pairing[i] >= M || pairing[i] == i || pairing[pairing[i]] != i)
      throw ContractError("pairing must be a fixed-point-free involution");
  }

  // normalize columns
  VecX<T> norms(M);
  MatX<T> zhat(embeddings.rows(), M);
  for (int i = 0; i < M; ++i) {
    T n = embeddings.col(i).norm();
    norms(i) = n;
    zhat.col(i) = n > T(0) ? (embeddings.col(i) / n).eval() : VecX<T>::Zero(embeddings.rows());
  }

  MatX<T> sim = zhat.transpose() * zhat;  // M x M cosine similarities
  T loss = T(0);
  MatX<T> d_sim;
  if (grad_out) d_sim = MatX<T>::Zero(M, M);

  for (int i = 0; i < M; ++i) {
    const int j = pairing[i];
    // log-sum-exp over k != i with max subtraction
    T mx = -std::numeric_limits<T>::infinity();
    for (int k = 0; k < M; ++k)
      if (k != i) mx = std::max(mx, sim(i, k) / tau);
    T denom = T(0);
    for (int k = 0; k < M; ++k)
      if (k != i) denom += std::exp(sim(i, k) / tau - mx);
    loss += -(sim(i, j) / tau) + mx + std::log(denom);
    if (grad_out) {
      for (int k = 0; k < M; ++k) {
        if (k == i) continue;
        T p = std::exp(sim(i, k) / tau - mx) / denom;
        d_sim(i, k) += (p - (k == j ? T(1) : T(0))) / tau;
      }
    }
  }
  loss /= T(M);

  if (grad_out) {
    d_sim /= T(M);
    // sim = zhat^T zhat  =>  dZhat = zhat * (d_sim + d_sim^T)
    MatX<T> d_zhat = zhat * (d_sim + d_sim.transpose());
    grad_out->resize(embeddings.rows(), M);
    for (int i = 0; i < M; ++i) {
      if (norms(i) > T(0)) {
        VecX<T> dz = d_zhat.col(i);
        grad_out->col(i) = (dz - zhat.col(i) * zhat.col(i).dot(dz)) / norms(i);
      } else {
        grad_out->col(i).setZero();
      }
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Contrastive pretraining (SimCLR-style, SGD + momentum, cosine LR decay).
// ---------------------------------------------------------------------------

struct ContrastiveConfig {
  double temperature = 0.5;
  int batch_pairs = 128;  // N; each step sees 2N views
  int epochs = 50;
  double learning_rate = 0.12;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  uint64_t seed = 0;
  AugmentConfig aug;

  void validate() const {
    if (temperature <= 0) throw ParameterError("temperature must be positive");
    if (batch_pairs < 1) throw ConfigError("batch_pairs must be >= 1");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
  }
};

struct PretrainResult {
  EncoderState enc;
  std::vector<std::pair<int64_t, double>> loss_curve;  // (step, loss)
};

/// One infoNCE training step on a pair of augmented views; returns the loss
/// and applies the SGD update. Factored out so attack/defense loops reuse it.
struct ContrastiveScratch {
  ForwardCache cache;
  EncoderGrads grads;
  bool ready = false;
};

inline double contrastive_step(EncoderState& enc, const ImageBatch& view_a,
                               const ImageBatch& view_b, double tau, Sgd& opt, double lr,
                               ContrastiveScratch* scratch = nullptr) {
  const int n = view_a.count();
  ImageBatch joined;
  joined.height = view_a.height;
  joined.width = view_a.width;
  joined.pixels.resize(view_a.pixels.rows(), 2 * n);
  joined.ids.resize(2 * n);
  for (int i = 0; i < n; ++i) {
    joined.pixels.col(2 * i) = view_a.pixels.col(i);
    joined.pixels.col(2 * i + 1) = view_b.pixels.col(i);
    joined.ids[2 * i] = view_a.ids[i];
    joined.ids[2 * i + 1] = view_b.ids[i];
  }

  ContrastiveScratch local;
  ContrastiveScratch& ws = scratch ? *scratch : local;
  if (!ws.ready) {
    ws.grads = EncoderGrads::zero_like(enc);
    ws.ready = true;
  } else {
    ws.grads.set_zero();
  }
  TapsBatch fwd = forward_train(enc, joined, &ws.cache);
  MatF d_z;
  float loss = info_nce_loss<float>(fwd.embeddings, adjacent_pairing(2 * n),
                                    float(tau), &d_z);
  BackSignals sig;
  sig.d_embeddings = std::move(d_z);
  encoder_backward(enc, joined, fwd, ws.cache, sig, ws.grads);
  opt.step(enc.params(), ws.grads.params(), lr);
  return loss;
}

/// Pretrains `enc` in place on unlabeled data. Optional checkpoint sink is
/// called every `save_every` epochs and is reused for the NaN-abort message.
inline PretrainResult pretrain(EncoderState enc, const ImageBatch& data,
                               const ContrastiveConfig& cfg, MetricsWriter* metrics = nullptr,
                               const std::function<std::string(EncoderState&, int)>& save = {},
                               int save_every = 0) {
  cfg.validate();
  PretrainResult res;
  const int n = data.count();
  if (n < 2) throw ContractError("pretraining needs at least 2 images");

  Sgd opt(cfg.momentum, cfg.weight_decay);
  ContrastiveScratch scratch;
  Rng order_rng(derive_seed(cfg.seed, "epoch-order"));
  const int batch = std::min(cfg.batch_pairs, n);
  const int steps_per_epoch = n / batch;
  const int64_t total_steps = int64_t(cfg.epochs) * steps_per_epoch;
  int64_t step = 0;
  std::string last_ckpt;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> perm = order_rng.permutation(n);
    for (int s = 0; s < steps_per_epoch; ++s, ++step) {
      std::vector<int> idx(perm.begin() + s * batch, perm.begin() + (s + 1) * batch);
      ImageBatch sub = data.select(idx);
      auto [va, vb] = augment_pair(sub, cfg.aug, derive_seed(cfg.seed, "views", step));
      double lr = cosine_lr(cfg.learning_rate, step, total_steps);
      double loss = contrastive_step(enc, va, vb, cfg.temperature, opt, lr, &scratch);
      if (!std::isfinite(loss))
        throw TrainingAborted("NaN contrastive loss at step " + std::to_string(step) +
                              (last_ckpt.empty() ? std::string(""
                                                   ) : "; last good checkpoint: " + last_ckpt));
      res.loss_curve.emplace_back(step, loss);
      if (metrics)
        metrics->write({{"kind", "loss"}, {"stage", "pretrain"}, {"step", step}, {"loss", loss}});
    }
    if (save && save_every > 0 && (epoch + 1) % save_every == 0)
      last_ckpt = save(enc, epoch);
  }
  res.enc = std::move(enc);
  return res;
}

}  // namespace mimic
