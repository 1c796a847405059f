#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mimic/common.hpp"
#include "mimic/encoder.hpp"
#include "mimic/optimizer.hpp"
#include "mimic/rng.hpp"

namespace mimic {

// ---------------------------------------------------------------------------
// MINE: maximize the Donsker-Varadhan bound E_P[T] - log E_Q[e^T] with a small
// statistics network T(u,v), Q formed by in-batch shuffling of v, and EMA bias
// correction of the log-term gradient.
// ---------------------------------------------------------------------------

struct MineConfig {
  int steps = 2000;
  int width = 128;
  double learning_rate = 5e-4;
  double ema_rate = 0.99;
  int batch = 128;
  uint64_t seed = 0;
};

namespace detail {

inline float gelu(float x) { return 0.5f * x * (1.0f + std::erf(x * float(M_SQRT1_2))); }
inline float gelu_grad(float x) {
  const float phi = std::exp(-0.5f * x * x) / std::sqrt(2.0f * float(M_PI));
  return 0.5f * (1.0f + std::erf(x * float(M_SQRT1_2))) + x * phi;
}

}  // namespace detail

/// Statistics network T: concat(u,v) -> width -> width -> 1, GELU activations.
/// Inputs are standardized with moments frozen at training time.
struct MineEstimator {
  int in_u = 0, in_v = 0;
  MatF w1;
  VecF b1;
  MatF w2;
  VecF b2;
  RowVecX<float> w3;
  float b3 = 0;
  VecF mu, sigma;  // input standardization, size in_u + in_v

  std::vector<ParamViewT<float>> params() {
    return {
        {"w1", w1.data(), {w1.rows(), w1.cols()}, w1.size()},
        {"b1", b1.data(), {b1.size()}, b1.size()},
        {"w2", w2.data(), {w2.rows(), w2.cols()}, w2.size()},
        {"b2", b2.data(), {b2.size()}, b2.size()},
        {"w3", w3.data(), {w3.size()}, w3.size()},
        {"b3", &b3, {1}, 1},
    };
  }

  /// T values for column-paired inputs (u_i, v_i).
  VecF evaluate(const MatF& u, const MatF& v) const {
    MatF x(in_u + in_v, u.cols());
    x.topRows(in_u) = u;
    x.bottomRows(in_v) = v;
    x = (x.colwise() - mu).array().colwise() / sigma.array();
    MatF a1 = (w1 * x).colwise() + b1;
    MatF h1 = a1.unaryExpr(&detail::gelu);
    MatF a2 = (w2 * h1).colwise() + b2;
    MatF h2 = a2.unaryExpr(&detail::gelu);
    return ((w3 * h2).array() + b3).transpose();
  }
};

namespace detail {

struct MineForward {
  MatF x, a1, h1, a2, h2;
  VecF t;
};

inline MineForward mine_forward(const MineEstimator& net, const MatF& u, const MatF& v) {
  MineForward f;
  f.x.resize(net.in_u + net.in_v, u.cols());
  f.x.topRows(net.in_u) = u;
  f.x.bottomRows(net.in_v) = v;
  f.x = (f.x.colwise() - net.mu).array().colwise() / net.sigma.array();
  f.a1 = (net.w1 * f.x).colwise() + net.b1;
  f.h1 = f.a1.unaryExpr(&gelu);
  f.a2 = (net.w2 * f.h1).colwise() + net.b2;
  f.h2 = f.a2.unaryExpr(&gelu);
  f.t = ((net.w3 * f.h2).array() + net.b3).transpose();
  return f;
}

struct MineGrads {
  MatF w1, w2;
  VecF b1, b2;
  RowVecX<float> w3;
  float b3 = 0;

  static MineGrads zero_like(const MineEstimator& n) {
    MineGrads g;
    g.w1 = MatF::Zero(n.w1.rows(), n.w1.cols());
    g.b1 = VecF::Zero(n.b1.size());
    g.w2 = MatF::Zero(n.w2.rows(), n.w2.cols());
    g.b2 = VecF::Zero(n.b2.size());
    g.w3 = RowVecX<float>::Zero(n.w3.size());
    g.b3 = 0;
    return g;
  }

  std::vector<ParamViewT<float>> params() {
    return {
        {"w1", w1.data(), {w1.rows(), w1.cols()}, w1.size()},
        {"b1", b1.data(), {b1.size()}, b1.size()},
        {"w2", w2.data(), {w2.rows(), w2.cols()}, w2.size()},
        {"b2", b2.data(), {b2.size()}, b2.size()},
        {"w3", w3.data(), {w3.size()}, w3.size()},
        {"b3", &b3, {1}, 1},
    };
  }
};

// Backprop dLoss/dT into parameter grads; optionally also into the (already
// standardized) input gradient d_x for estimator-through-encoder paths.
inline void mine_backward(const MineEstimator& net, const MineForward& f, const VecF& d_t,
                          MineGrads& g, MatF* d_x_raw = nullptr) {
  RowVecX<float> d_t_row = d_t.transpose();
  g.b3 += d_t.sum();
  g.w3.noalias() += d_t_row * f.h2.transpose();
  MatF d_h2 = net.w3.transpose() * d_t_row;
  MatF d_a2 = d_h2.cwiseProduct(f.a2.unaryExpr(&gelu_grad));
  g.b2 += d_a2.rowwise().sum();
  g.w2.noalias() += d_a2 * f.h1.transpose();
  MatF d_h1 = net.w2.transpose() * d_a2;
  MatF d_a1 = d_h1.cwiseProduct(f.a1.unaryExpr(&gelu_grad));
  g.b1 += d_a1.rowwise().sum();
  g.w1.noalias() += d_a1 * f.x.transpose();
  if (d_x_raw) {
    MatF d_x = net.w1.transpose() * d_a1;
    *d_x_raw = d_x.array().colwise() / net.sigma.array();  // undo standardization scaling
  }
}

}  // namespace detail

/// Frozen-net DV bound on the full sample set; the marginal expectation is
/// averaged over `shuffles` seeded permutations to cut estimator variance.
inline double dv_bound(const MineEstimator& net, const MatF& u, const MatF& v, uint64_t seed,
                       int shuffles = 8) {
  const int n = int(u.cols());
  VecF t_joint = net.evaluate(u, v);
  double joint_mean = double(t_joint.sum()) / n;

  Rng rng(derive_seed(seed, "dv-eval"));
  double log_sum = 0;
  for (int r = 0; r < shuffles; ++r) {
    std::vector<int> perm = rng.permutation(n);
    MatF v_shuf(v.rows(), n);
    for (int i = 0; i < n; ++i) v_shuf.col(i) = v.col(perm[i]);
    VecF t_marg = net.evaluate(u, v_shuf);
    double mx = t_marg.maxCoeff();
    double acc = 0;
    for (int i = 0; i < n; ++i) acc += std::exp(double(t_marg(i)) - mx);
    log_sum += mx + std::log(acc / n);
  }
  return joint_mean - log_sum / shuffles;
}

struct MineResult {
  MineEstimator net;
  double estimate = 0;  // converged DV bound, nats
};

/// Trains a fresh statistics network on jointly drawn column pairs (u_i, v_i).
inline MineResult mine_train(const MatF& u, const MatF& v, const MineConfig& cfg) {
  const int n = int(u.cols());
  if (n < 2 || v.cols() != n) throw ContractError("mine_train needs >= 2 paired samples");
  if (cfg.ema_rate <= 0 || cfg.ema_rate >= 1) throw ParameterError("ema_rate must be in (0,1)");

  MineEstimator net;
  net.in_u = int(u.rows());
  net.in_v = int(v.rows());
  const int din = net.in_u + net.in_v, w = cfg.width;
  {
    Rng rng(derive_seed(cfg.seed, "mine-init"));
    auto init = [&](MatF& m, int rows, int cols) {
      m.resize(rows, cols);
      float bound = std::sqrt(6.0f / float(cols));
      for (int i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform_f(-bound, bound);
    };
    init(net.w1, w, din);
    net.b1 = VecF::Zero(w);
    init(net.w2, w, w);
    net.b2 = VecF::Zero(w);
    MatF w3m;
    init(w3m, 1, w);
    net.w3 = w3m.row(0);
    net.b3 = 0;
  }
  // input standardization moments from the joint sample
  net.mu.resize(din);
  net.sigma.resize(din);
  {
    MatF x(din, n);
    x.topRows(net.in_u) = u;
    x.bottomRows(net.in_v) = v;
    for (int d = 0; d < din; ++d) {
      double m = x.row(d).cast<double>().mean();
      double var = (x.row(d).cast<double>().array() - m).square().mean();
      net.mu(d) = float(m);
      net.sigma(d) = var > 1e-12 ? float(std::sqrt(var)) : 1.0f;
    }
  }

  Adam opt(cfg.learning_rate);
  Rng rng(derive_seed(cfg.seed, "mine-train"));
  const int batch = std::min(cfg.batch, n);
  double ema = -1;
  int low_bound_streak = 0;

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<int> idx(batch), shuf(batch);
    for (int i = 0; i < batch; ++i) idx[i] = rng.uniform_int(n);
    for (int i = 0; i < batch; ++i) shuf[i] = idx[rng.uniform_int(batch)];
    MatF ub(u.rows(), batch), vb(v.rows(), batch), vm(v.rows(), batch);
    for (int i = 0; i < batch; ++i) {
      ub.col(i) = u.col(idx[i]);
      vb.col(i) = v.col(idx[i]);
      vm.col(i) = v.col(shuf[i]);
    }

    auto fj = detail::mine_forward(net, ub, vb);
    auto fm = detail::mine_forward(net, ub, vm);

    VecF et = fm.t.array().min(30.0f).exp();  // clip to dodge overflow
    double mean_et = double(et.sum()) / batch;
    ema = ema < 0 ? mean_et : cfg.ema_rate * ema + (1 - cfg.ema_rate) * mean_et;
    double bound = double(fj.t.sum()) / batch - std::log(mean_et);
    low_bound_streak = bound < -10.0 ? low_bound_streak + 1 : 0;
    if (low_bound_streak >= 50)
      throw TrainingAborted("MINE diverged: DV bound below -10 nats for 50 steps (step " +
                            std::to_string(step) + ", bound " + std::to_string(bound) + ")");

    // maximize bound => descend on -bound; log term gradient uses the EMA denominator
    detail::MineGrads grads = detail::MineGrads::zero_like(net);
    VecF d_t_joint = VecF::Constant(batch, -1.0f / float(batch));
    detail::mine_backward(net, fj, d_t_joint, grads);
    VecF d_t_marg = et / float(batch * ema);
    detail::mine_backward(net, fm, d_t_marg, grads);
    opt.step(net.params(), grads.params());
  }

  MineResult res;
  res.estimate = dv_bound(net, u, v, cfg.seed);
  res.net = std::move(net);
  return res;
}

// ---------------------------------------------------------------------------
// Per-layer MI profile (Algorithm 1, lines 3-7) and potency weights (line 8).
// ---------------------------------------------------------------------------

struct MIProfile {
  std::vector<double> values;         // m_l in nats
  std::vector<int> layer_indices;     // 0..K-1
  int sample_count = 0;
  std::vector<uint64_t> estimator_seeds;
};

struct LocalizeConfig {
  MineConfig mine;
  bool use_projected = true;  // second variable: projected z (default) or F(x)
  int chunk = 256;
};

/// Globally average pooled activations per tap plus the final features,
/// harvested in chunks so full-resolution maps never accumulate.
struct PooledActivations {
  std::vector<MatF> pooled;  // K entries: C_l x n
  MatF features;             // feature_dim x n (pre-projector)
  MatF embeddings;           // feature_dim x n (projected z)
};

inline PooledActivations harvest_pooled(const EncoderState& enc, const ImageBatch& data,
                                        int chunk = 256) {
  if (data.count() == 0) throw ContractError("harvest_pooled: empty input set");
  PooledActivations out;
  const int n = data.count();
  const int K = enc.num_stages();
  out.pooled.resize(K);
  for (int i = 0; i < n; i += chunk) {
    std::vector<int> idx;
    for (int k = i; k < std::min(n, i + chunk); ++k) idx.push_back(k);
    TapsBatch fwd = forward_with_taps(enc, data.select(idx));
    if (i == 0) {
      for (int l = 0; l < K; ++l) out.pooled[l].resize(fwd.taps[l].channels, n);
      out.features.resize(enc.feature_dim, n);
      out.embeddings.resize(enc.feature_dim, n);
    }
    for (int l = 0; l < K; ++l) {
      const auto& t = fwd.taps[l];
      for (int b = 0; b < int(idx.size()); ++b)
        out.pooled[l].col(i + b) = t.image(b).rowwise().mean();
    }
    out.features.middleCols(i, idx.size()) = fwd.features;
    out.embeddings.middleCols(i, idx.size()) = fwd.embeddings;
  }
  return out;
}

/// Trains one fresh MINE estimator per tapped layer between pooled tap-l
/// activations and the final features, and records the converged bounds.
inline MIProfile estimate_layer_mi(const EncoderState& enc, const ImageBatch& clean_set,
                                   const LocalizeConfig& cfg) {
  if (clean_set.count() == 0) throw ContractError("estimate_layer_mi: empty clean set");
  PooledActivations acts = harvest_pooled(enc, clean_set, cfg.chunk);
  const MatF& target = cfg.use_projected ? acts.embeddings : acts.features;

  MIProfile profile;
  profile.sample_count = clean_set.count();
  for (int l = 0; l < enc.num_stages(); ++l) {
    MineConfig mc = cfg.mine;
    mc.seed = derive_seed(cfg.mine.seed, "layer", uint64_t(l));
    try {
      MineResult res = mine_train(acts.pooled[l], target, mc);
      profile.values.push_back(res.estimate);
    } catch (const TrainingAborted& e) {
      throw TrainingAborted("layer " + std::to_string(l) + ": " + e.what());
    }
    profile.layer_indices.push_back(l);
    profile.estimator_seeds.push_back(mc.seed);
  }
  return profile;
}

/// Distillation potency weights (Algorithm 1, line 8):
/// beta = alpha0 + alpha1 * (m - mean(m)) / stdev(m), population stdev, with
/// the zero-variance fallback beta = alpha0 everywhere.
struct PotencyWeights {
  std::vector<double> beta;
  double alpha0 = 1.0;
  double alpha1 = 0.5;
  MIProfile source_profile;
};

inline PotencyWeights schedule_weights(const MIProfile& profile, double alpha0, double alpha1) {
  if (alpha1 < 0) throw ParameterError("alpha1 must be non-negative");
  if (profile.values.empty()) throw ContractError("empty MI profile");
  const int k = int(profile.values.size());
  double mean = 0;
  for (double m : profile.values) mean += m;
  mean /= k;
  double var = 0;
  for (double m : profile.values) var += (m - mean) * (m - mean);
  var /= k;
  const double stdev = std::sqrt(var);

  PotencyWeights out;
  out.alpha0 = alpha0;
  out.alpha1 = alpha1;
  out.source_profile = profile;
  for (double m : profile.values)
    out.beta.push_back(stdev > 0 ? alpha0 + alpha1 * (m - mean) / stdev : alpha0);
  return out;
}

}  // namespace mimic
