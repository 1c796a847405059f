#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mimic/common.hpp"
#include "mimic/image.hpp"
#include "mimic/rng.hpp"

namespace mimic {

// ---------------------------------------------------------------------------
// Architecture registry. Every arch is a strict linear chain of K conv stages
// (3x3, stride 2, pad 1, batch norm, bias, ReLU), followed by global average
// pooling, an FC producing the pre-projector features F(x), and a 2-layer MLP
// projector g whose output z feeds the contrastive loss.
// ---------------------------------------------------------------------------

struct ArchSpec {
  std::string id;
  int input_size = 0;              // expected H == W
  std::vector<int> stage_channels; // K entries
};

inline const ArchSpec& arch_spec(const std::string& arch_id) {
  static const std::vector<ArchSpec> kArchs = {
      {"conv4", 32, {64, 128, 256, 512}},
      {"conv4_tiny", 16, {8, 16, 32, 64}},
  };
  for (const auto& a : kArchs)
    if (a.id == arch_id) return a;
  throw ConfigError("unknown arch_id: " + arch_id);
}

// ---------------------------------------------------------------------------
// Parameter containers (templated so gradient checks can run in double).
// ---------------------------------------------------------------------------

template <class T>
struct ConvStageT {
  int in_ch = 0, out_ch = 0;
  MatX<T> weight;        // out_ch x (9*in_ch), column index = (ky*3+kx)*in_ch + c
  VecX<T> bias;          // out_ch, applied after normalization
  VecX<T> running_mean;  // batch-norm running statistics (state, not trained)
  VecX<T> running_var;
};

template <class T>
struct ParamViewT {
  std::string name;
  T* data;
  std::vector<int64_t> shape;
  int64_t size;
};

template <class T>
struct EncoderStateT {
  std::string arch_id;
  int feature_dim = 0;
  uint64_t seed = 0;
  std::vector<ConvStageT<T>> stages;
  MatX<T> fc_w;  // feature_dim x last_ch
  VecX<T> fc_b;
  MatX<T> proj_w1;  // feature_dim x feature_dim
  VecX<T> proj_b1;
  MatX<T> proj_w2;
  VecX<T> proj_b2;

  int num_stages() const { return int(stages.size()); }

  /// Trainable parameters (what the optimizer updates).
  std::vector<ParamViewT<T>> params() {
    std::vector<ParamViewT<T>> v;
    auto add = [&](const std::string& name, MatX<T>& m) {
      v.push_back({name, m.data(), {m.rows(), m.cols()}, m.size()});
    };
    auto addv = [&](const std::string& name, VecX<T>& b) {
      v.push_back({name, b.data(), {b.size()}, b.size()});
    };
    for (size_t l = 0; l < stages.size(); ++l) {
      add("stage" + std::to_string(l) + ".weight", stages[l].weight);
      addv("stage" + std::to_string(l) + ".bias", stages[l].bias);
    }
    add("head.fc.weight", fc_w);
    addv("head.fc.bias", fc_b);
    add("proj.fc1.weight", proj_w1);
    addv("proj.fc1.bias", proj_b1);
    add("proj.fc2.weight", proj_w2);
    addv("proj.fc2.bias", proj_b2);
    return v;
  }

  /// Everything that defines the encoder function: trainable parameters plus
  /// normalization statistics. This is what checkpoints persist.
  std::vector<ParamViewT<T>> state_tensors() {
    std::vector<ParamViewT<T>> v = params();
    for (size_t l = 0; l < stages.size(); ++l) {
      v.push_back({"stage" + std::to_string(l) + ".running_mean", stages[l].running_mean.data(),
                   {stages[l].running_mean.size()}, stages[l].running_mean.size()});
      v.push_back({"stage" + std::to_string(l) + ".running_var", stages[l].running_var.data(),
                   {stages[l].running_var.size()}, stages[l].running_var.size()});
    }
    return v;
  }

  bool same_shape_as(const EncoderStateT& o) const {
    return arch_id == o.arch_id && feature_dim == o.feature_dim;
  }
};

using EncoderState = EncoderStateT<float>;

template <class T>
inline EncoderStateT<T> make_encoder_shell(const std::string& arch_id, int feature_dim) {
  const ArchSpec& spec = arch_spec(arch_id);
  if (feature_dim < 1) throw ConfigError("feature_dim must be positive");
  EncoderStateT<T> enc;
  enc.arch_id = arch_id;
  enc.feature_dim = feature_dim;
  int in_ch = 3;
  for (int out_ch : spec.stage_channels) {
    ConvStageT<T> s;
    s.in_ch = in_ch;
    s.out_ch = out_ch;
    s.weight = MatX<T>::Zero(out_ch, 9 * in_ch);
    s.bias = VecX<T>::Zero(out_ch);
    s.running_mean = VecX<T>::Zero(out_ch);
    s.running_var = VecX<T>::Ones(out_ch);
    enc.stages.push_back(std::move(s));
    in_ch = out_ch;
  }
  enc.fc_w = MatX<T>::Zero(feature_dim, in_ch);
  enc.fc_b = VecX<T>::Zero(feature_dim);
  enc.proj_w1 = MatX<T>::Zero(feature_dim, feature_dim);
  enc.proj_b1 = VecX<T>::Zero(feature_dim);
  enc.proj_w2 = MatX<T>::Zero(feature_dim, feature_dim);
  enc.proj_b2 = VecX<T>::Zero(feature_dim);
  return enc;
}

/// Fresh parameters: Kaiming-uniform weights (bound sqrt(6/fan_in)), zero
/// biases, unit running variance. Each tensor draws from its own named stream,
/// so the layout of the state never perturbs another tensor's values.
inline EncoderState init_random(const std::string& arch_id, uint64_t seed, int feature_dim = 128) {
  EncoderState enc = make_encoder_shell<float>(arch_id, feature_dim);
  enc.seed = seed;
  for (auto& p : enc.params()) {
    if (p.name.find("bias") != std::string::npos) continue;
    int64_t fan_in = p.shape.size() == 2 ? p.shape[1] : p.size;
    float bound = std::sqrt(6.0f / float(fan_in));
    Rng rng(derive_seed(seed, "init:" + p.name));
    for (int64_t i = 0; i < p.size; ++i) p.data[i] = rng.uniform_f(-bound, bound);
  }
  return enc;
}

// ---------------------------------------------------------------------------
// Activations. An ActBatch stores K-channel maps for a whole batch:
// data is channels x (count*H*W); column b*H*W + y*W + x holds all channels of
// one spatial position of image b.
// ---------------------------------------------------------------------------

template <class T>
struct ActBatchT {
  int channels = 0, height = 0, width = 0, count = 0;
  MatX<T> data;

  int spatial() const { return height * width; }
  auto image(int b) const { return data.middleCols(b * spatial(), spatial()); }
};

using ActBatch = ActBatchT<float>;

// Fixed input normalization: [0,1] pixels are centered and rescaled before
// the first conv.
inline constexpr float kInputCenter = 0.5f;
inline constexpr float kInputScale = 4.0f;

template <class T>
inline ActBatchT<T> image_batch_to_acts(const ImageBatch& batch) {
  ActBatchT<T> act;
  act.channels = 3;
  act.height = batch.height;
  act.width = batch.width;
  act.count = batch.count();
  const int S = act.spatial();
  act.data.resize(3, act.count * S);
  for (int b = 0; b < act.count; ++b)
    for (int c = 0; c < 3; ++c)
      for (int s = 0; s < S; ++s)
        act.data(c, b * S + s) =
            (T(batch.pixels(c * S + s, b)) - T(kInputCenter)) * T(kInputScale);
  return act;
}

namespace detail {

// im2col for 3x3 stride-2 pad-1 convolution.
// col row index = (ky*3+kx)*C + c, column index = b*S_out + oy*OW + ox.
template <class T>
inline void im2col_3x3s2(const ActBatchT<T>& in, MatX<T>& col) {
  const int C = in.channels, H = in.height, W = in.width;
  const int OH = (H + 1) / 2, OW = (W + 1) / 2, S = H * W, SO = OH * OW;
  col.resize(9 * C, in.count * SO);
#pragma omp parallel for schedule(static)
  for (int b = 0; b < in.count; ++b) {
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox) {
        T* dst = col.col(b * SO + oy * OW + ox).data();
        for (int ky = 0; ky < 3; ++ky) {
          int iy = oy * 2 - 1 + ky;
          for (int kx = 0; kx < 3; ++kx) {
            int ix = ox * 2 - 1 + kx;
            T* out = dst + (ky * 3 + kx) * C;
            if (iy < 0 || iy >= H || ix < 0 || ix >= W) {
              for (int c = 0; c < C; ++c) out[c] = T(0);
            } else {
              const T* src = in.data.col(b * S + iy * W + ix).data();
              for (int c = 0; c < C; ++c) out[c] = src[c];
            }
          }
        }
      }
  }
}

// Transpose of im2col: scatter-add column gradients back onto the input grid.
// Images are independent, so the parallel loop is deterministic.
template <class T>
inline void col2im_3x3s2(const MatX<T>& dcol, ActBatchT<T>& din) {
  const int C = din.channels, H = din.height, W = din.width;
  const int OH = (H + 1) / 2, OW = (W + 1) / 2, S = H * W, SO = OH * OW;
  din.data.setZero();
#pragma omp parallel for schedule(static)
  for (int b = 0; b < din.count; ++b) {
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox) {
        const T* src = dcol.col(b * SO + oy * OW + ox).data();
        for (int ky = 0; ky < 3; ++ky) {
          int iy = oy * 2 - 1 + ky;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < 3; ++kx) {
            int ix = ox * 2 - 1 + kx;
            if (ix < 0 || ix >= W) continue;
            T* dst = din.data.col(b * S + iy * W + ix).data();
            const T* g = src + (ky * 3 + kx) * C;
            for (int c = 0; c < C; ++c) dst[c] += g[c];
          }
        }
      }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

template <class T>
struct TapsBatchT {
  std::vector<ActBatchT<T>> taps;  // K post-ReLU stage outputs (A^l)
  MatX<T> pooled;                  // last_ch x B
  MatX<T> features;                // feature_dim x B, pre-projector F(x)
  MatX<T> proj_hidden;             // feature_dim x B, post-ReLU
  MatX<T> embeddings;              // feature_dim x B, projected z

  int count() const { return int(features.cols()); }
};

using TapsBatch = TapsBatchT<float>;

template <class T>
struct ForwardCacheT {
  std::vector<MatX<T>> cols;      // per-stage im2col matrices
  std::vector<MatX<T>> norm_pre;  // per-stage normalized pre-activation x_hat
  std::vector<VecX<T>> inv_sigma; // per-stage 1/sqrt(var+eps), per channel
  bool train_mode = false;        // which statistics produced norm_pre
  // backward scratch, one per stage so sizes stay stable across steps
  std::vector<MatX<T>> bwd_dcol;
  std::vector<MatX<T>> bwd_dtap;
  std::vector<MatX<T>> bwd_dx;
};

using ForwardCache = ForwardCacheT<float>;

/// Applies stage l: conv 3x3 s2 p1, batch normalization, bias shift, ReLU.
/// Eval mode normalizes with the stored running statistics and is a pure
/// per-sample function; train mode uses batch statistics and updates the
/// running averages on the mutable stage passed in.
template <class T>
inline ActBatchT<T> apply_stage(const EncoderStateT<T>& enc, int l, const ActBatchT<T>& in,
                                MatX<T>* col_out = nullptr, MatX<T>* norm_pre_out = nullptr,
                                VecX<T>* inv_sigma_out = nullptr,
                                ConvStageT<T>* train_stage = nullptr,
                                bool batch_stats = false) {
  const auto& st = enc.stages[l];
  if (in.channels != st.in_ch)
    throw ContractError("stage " + std::to_string(l) + " expects " + std::to_string(st.in_ch) +
                        " channels, got " + std::to_string(in.channels));
  ActBatchT<T> out;
  out.channels = st.out_ch;
  out.height = (in.height + 1) / 2;
  out.width = (in.width + 1) / 2;
  out.count = in.count;
  MatX<T> local_col;
  MatX<T>& col = col_out ? *col_out : local_col;
  detail::im2col_3x3s2(in, col);
  out.data.noalias() = st.weight * col;

  VecX<T> mean(st.out_ch), inv_sigma(st.out_ch);
  if (train_stage || batch_stats) {
    mean = out.data.rowwise().mean();
    VecX<T> var =
        out.data.array().square().rowwise().mean().matrix() - mean.cwiseProduct(mean);
    var = var.cwiseMax(T(0));
    inv_sigma = (var.array() + T(kBatchNormEps)).rsqrt();
    if (train_stage) {
      train_stage->running_mean =
          T(1.0 - kBatchNormMomentum) * train_stage->running_mean + T(kBatchNormMomentum) * mean;
      train_stage->running_var =
          T(1.0 - kBatchNormMomentum) * train_stage->running_var + T(kBatchNormMomentum) * var;
    }
  } else {
    mean = st.running_mean;
    inv_sigma = (st.running_var.array() + T(kBatchNormEps)).rsqrt();
  }
  out.data = ((out.data.colwise() - mean).array().colwise() * inv_sigma.array()).matrix();
  if (norm_pre_out) *norm_pre_out = out.data;
  if (inv_sigma_out) *inv_sigma_out = inv_sigma;

  out.data.colwise() += st.bias;
  out.data = out.data.cwiseMax(T(0));
  return out;
}

namespace detail {

template <class T>
inline TapsBatchT<T> forward_impl(const EncoderStateT<T>& enc, const ImageBatch& batch,
                                  ForwardCacheT<T>* cache, EncoderStateT<T>* mutable_enc,
                                  bool batch_stats = false) {
  const ArchSpec& spec = arch_spec(enc.arch_id);
  if (batch.height != spec.input_size || batch.width != spec.input_size)
    throw ContractError("arch " + enc.arch_id + " expects " + std::to_string(spec.input_size) +
                        "x" + std::to_string(spec.input_size) + " input, got " +
                        std::to_string(batch.height) + "x" + std::to_string(batch.width));
  if (batch.count() == 0) throw ContractError("empty batch");

  TapsBatchT<T> out;
  if (cache) {
    cache->cols.resize(enc.stages.size());
    cache->norm_pre.resize(enc.stages.size());
    cache->inv_sigma.resize(enc.stages.size());
    cache->train_mode = mutable_enc != nullptr || batch_stats;
  }
  ActBatchT<T> input_acts = image_batch_to_acts<T>(batch);
  for (int l = 0; l < enc.num_stages(); ++l) {
    const ActBatchT<T>& in = l == 0 ? input_acts : out.taps.back();
    ActBatchT<T> next = apply_stage(enc, l, in, cache ? &cache->cols[l] : nullptr,
                                    cache ? &cache->norm_pre[l] : nullptr,
                                    cache ? &cache->inv_sigma[l] : nullptr,
                                    mutable_enc ? &mutable_enc->stages[l] : nullptr, batch_stats);
    if (!next.data.allFinite())
      throw NumericError("non-finite activation at layer " + std::to_string(l));
    out.taps.push_back(std::move(next));
  }

  const ActBatchT<T>& last_tap = out.taps.back();
  const int B = last_tap.count, S = last_tap.spatial();
  out.pooled.resize(last_tap.channels, B);
  for (int b = 0; b < B; ++b)
    out.pooled.col(b) = last_tap.data.middleCols(b * S, S).rowwise().mean();
  out.features.noalias() = enc.fc_w * out.pooled;
  out.features.colwise() += enc.fc_b;
  out.proj_hidden.noalias() = enc.proj_w1 * out.features;
  out.proj_hidden.colwise() += enc.proj_b1;
  out.proj_hidden = out.proj_hidden.cwiseMax(T(0));
  out.embeddings.noalias() = enc.proj_w2 * out.proj_hidden;
  out.embeddings.colwise() += enc.proj_b2;
  if (!out.embeddings.allFinite()) throw NumericError("non-finite embedding");
  return out;
}

}  // namespace detail

/// Eval-mode forward (running statistics; pure function of input and params).
template <class T>
inline TapsBatchT<T> forward_with_taps(const EncoderStateT<T>& enc, const ImageBatch& batch,
                                       ForwardCacheT<T>* cache = nullptr) {
  return detail::forward_impl<T>(enc, batch, cache, nullptr);
}

/// Train-mode forward: batch statistics drive normalization and the running
/// averages of `enc` are updated in place.
template <class T>
inline TapsBatchT<T> forward_train(EncoderStateT<T>& enc, const ImageBatch& batch,
                                   ForwardCacheT<T>* cache = nullptr) {
  return detail::forward_impl<T>(enc, batch, cache, &enc);
}

/// Batch-statistics forward without touching the running averages. Used for
/// the frozen teacher so distillation targets live in the same normalization
/// semantics as the student's training pass.
template <class T>
inline TapsBatchT<T> forward_batch_stats(const EncoderStateT<T>& enc, const ImageBatch& batch,
                                         ForwardCacheT<T>* cache = nullptr) {
  return detail::forward_impl<T>(enc, batch, cache, nullptr, true);
}

/// Per-image view of a batched forward: K activation maps plus the embedding.
template <class T>
struct LayerTapSetT {
  std::vector<ActBatchT<T>> activations;  // each with count == 1
  VecX<T> embedding;
};

using LayerTapSet = LayerTapSetT<float>;

template <class T>
inline LayerTapSetT<T> tap_set(const TapsBatchT<T>& taps, int image_index) {
  LayerTapSetT<T> out;
  for (const auto& t : taps.taps) {
    ActBatchT<T> one;
    one.channels = t.channels;
    one.height = t.height;
    one.width = t.width;
    one.count = 1;
    one.data = t.image(image_index);
    out.activations.push_back(std::move(one));
  }
  out.embedding = taps.embeddings.col(image_index);
  return out;
}

// ---------------------------------------------------------------------------
// Attention operator (per-map): AT(A)[h,w] = sum_c |A[c,h,w]|^p.
// ---------------------------------------------------------------------------

template <class T>
struct AttentionMapT {
  MatX<T> values;  // height x width, non-negative
  int layer_index = 0;
};

using AttentionMap = AttentionMapT<float>;

/// Row vector of attention values over all spatial positions of a (possibly
/// batched) activation matrix.
template <class T>
inline RowVecX<T> attention_rows(const MatX<T>& act, int p) {
  if (p < 1) throw ParameterError("attention order p must be >= 1");
  if (p == 1) return act.array().abs().colwise().sum();
  if (p == 2) return act.array().square().colwise().sum();
  return act.array().abs().pow(T(p)).colwise().sum();
}

template <class T>
inline AttentionMapT<T> attention_of(const ActBatchT<T>& act, int p, int layer_index = 0) {
  if (act.channels < 1) throw ContractError("attention requires at least one channel");
  if (act.count != 1) throw ContractError("attention_of expects a single activation map");
  RowVecX<T> flat = attention_rows<T>(act.data, p);
  AttentionMapT<T> out;
  out.layer_index = layer_index;
  out.values.resize(act.height, act.width);
  for (int y = 0; y < act.height; ++y)
    for (int x = 0; x < act.width; ++x) out.values(y, x) = flat(y * act.width + x);
  return out;
}

// ---------------------------------------------------------------------------
// Backward pass. Gradients may be injected at the embedding, the pre-projector
// features, and any tap (all three are used by the distillation losses and by
// the adaptive attack regularizer).
// ---------------------------------------------------------------------------

template <class T>
struct BackSignalsT {
  MatX<T> d_embeddings;            // feature_dim x B or empty
  MatX<T> d_features;              // feature_dim x B or empty
  MatX<T> d_pooled;                // last_ch x B or empty
  std::vector<MatX<T>> d_taps;     // per layer: channels x (B*S) or empty
};

using BackSignals = BackSignalsT<float>;

template <class T>
struct EncoderGradsT {
  std::vector<ConvStageT<T>> stages;  // running stats unused here
  MatX<T> fc_w;
  VecX<T> fc_b;
  MatX<T> proj_w1;
  VecX<T> proj_b1;
  MatX<T> proj_w2;
  VecX<T> proj_b2;

  static EncoderGradsT zero_like(const EncoderStateT<T>& enc) {
    EncoderGradsT g;
    for (const auto& st : enc.stages) {
      ConvStageT<T> s;
      s.in_ch = st.in_ch;
      s.out_ch = st.out_ch;
      s.weight = MatX<T>::Zero(st.weight.rows(), st.weight.cols());
      s.bias = VecX<T>::Zero(st.bias.size());
      s.running_mean = VecX<T>::Zero(0);
      s.running_var = VecX<T>::Zero(0);
      g.stages.push_back(std::move(s));
    }
    g.fc_w = MatX<T>::Zero(enc.fc_w.rows(), enc.fc_w.cols());
    g.fc_b = VecX<T>::Zero(enc.fc_b.size());
    g.proj_w1 = MatX<T>::Zero(enc.proj_w1.rows(), enc.proj_w1.cols());
    g.proj_b1 = VecX<T>::Zero(enc.proj_b1.size());
    g.proj_w2 = MatX<T>::Zero(enc.proj_w2.rows(), enc.proj_w2.cols());
    g.proj_b2 = VecX<T>::Zero(enc.proj_b2.size());
    return g;
  }

  /// Clears accumulated gradients in place (buffer-reusing training loops).
  void set_zero() {
    for (auto& s : stages) {
      s.weight.setZero();
      s.bias.setZero();
    }
    fc_w.setZero();
    fc_b.setZero();
    proj_w1.setZero();
    proj_b1.setZero();
    proj_w2.setZero();
    proj_b2.setZero();
  }

  std::vector<ParamViewT<T>> params() {
    std::vector<ParamViewT<T>> v;
    for (size_t l = 0; l < stages.size(); ++l) {
      v.push_back({"stage" + std::to_string(l) + ".weight", stages[l].weight.data(),
                   {stages[l].weight.rows(), stages[l].weight.cols()}, stages[l].weight.size()});
      v.push_back({"stage" + std::to_string(l) + ".bias", stages[l].bias.data(),
                   {stages[l].bias.size()}, stages[l].bias.size()});
    }
    v.push_back({"head.fc.weight", fc_w.data(), {fc_w.rows(), fc_w.cols()}, fc_w.size()});
    v.push_back({"head.fc.bias", fc_b.data(), {fc_b.size()}, fc_b.size()});
    v.push_back({"proj.fc1.weight", proj_w1.data(), {proj_w1.rows(), proj_w1.cols()}, proj_w1.size()});
    v.push_back({"proj.fc1.bias", proj_b1.data(), {proj_b1.size()}, proj_b1.size()});
    v.push_back({"proj.fc2.weight", proj_w2.data(), {proj_w2.rows(), proj_w2.cols()}, proj_w2.size()});
    v.push_back({"proj.fc2.bias", proj_b2.data(), {proj_b2.size()}, proj_b2.size()});
    return v;
  }
};

using EncoderGrads = EncoderGradsT<float>;

/// Accumulates parameter gradients for the given injected signals into `grads`.
/// The cache decides the normalization backward: batch statistics (train mode)
/// carry the mean/variance terms, running statistics are constants.
template <class T>
inline void encoder_backward(const EncoderStateT<T>& enc, const ImageBatch& input,
                             const TapsBatchT<T>& fwd, ForwardCacheT<T>& cache,
                             const BackSignalsT<T>& sig, EncoderGradsT<T>& grads) {
  cache.bwd_dcol.resize(enc.stages.size());
  cache.bwd_dtap.resize(enc.stages.size());
  cache.bwd_dx.resize(enc.stages.size());
  const int B = fwd.count();
  const int fdim = enc.feature_dim;

  // projector
  MatX<T> d_feat = MatX<T>::Zero(fdim, B);
  if (sig.d_embeddings.size() > 0) {
    const MatX<T>& dz = sig.d_embeddings;
    grads.proj_b2 += dz.rowwise().sum();
    grads.proj_w2.noalias() += dz * fwd.proj_hidden.transpose();
    MatX<T> dh = enc.proj_w2.transpose() * dz;
    dh = (fwd.proj_hidden.array() > T(0)).select(dh, MatX<T>::Zero(fdim, B));
    grads.proj_b1 += dh.rowwise().sum();
    grads.proj_w1.noalias() += dh * fwd.features.transpose();
    d_feat.noalias() += enc.proj_w1.transpose() * dh;
  }
  if (sig.d_features.size() > 0) d_feat += sig.d_features;

  // head FC
  grads.fc_b += d_feat.rowwise().sum();
  grads.fc_w.noalias() += d_feat * fwd.pooled.transpose();
  MatX<T> d_pooled = enc.fc_w.transpose() * d_feat;
  if (sig.d_pooled.size() > 0) d_pooled += sig.d_pooled;

  // GAP spread seeds the top-level tap gradient
  const ActBatchT<T>& last = fwd.taps.back();
  const int S_last = last.spatial();
  {
    MatX<T>& d_top = cache.bwd_dtap[enc.num_stages() - 1];
    d_top.resize(last.channels, B * S_last);
    for (int b = 0; b < B; ++b)
      d_top.middleCols(b * S_last, S_last).colwise() = VecX<T>(d_pooled.col(b) / T(S_last));
  }

  // conv chain, top down; every buffer is per-stage so sizes stay stable
  for (int l = enc.num_stages() - 1; l >= 0; --l) {
    const ActBatchT<T>& tap = fwd.taps[l];
    MatX<T>& d_tap = cache.bwd_dtap[l];
    if (int(sig.d_taps.size()) > l && sig.d_taps[l].size() > 0) d_tap += sig.d_taps[l];
    MatX<T>& d_x = cache.bwd_dx[l];
    d_x = (tap.data.array() > T(0)).select(d_tap, MatX<T>::Zero(d_tap.rows(), d_tap.cols()));
    grads.stages[l].bias += d_x.rowwise().sum();

    // batch norm backward (in place over the masked gradient)
    const VecX<T>& inv_sigma = cache.inv_sigma[l];
    if (cache.train_mode) {
      const MatX<T>& xhat = cache.norm_pre[l];
      VecX<T> m1 = d_x.rowwise().mean();
      VecX<T> m2 = d_x.cwiseProduct(xhat).rowwise().mean();
      d_x = (((d_x.colwise() - m1) - (xhat.array().colwise() * m2.array()).matrix())
                 .array()
                 .colwise() *
             inv_sigma.array())
                .matrix();
    } else {
      d_x = (d_x.array().colwise() * inv_sigma.array()).matrix();
    }

    grads.stages[l].weight.noalias() += d_x * cache.cols[l].transpose();
    if (l > 0) {
      MatX<T>& d_col = cache.bwd_dcol[l];
      d_col.resize(enc.stages[l].weight.cols(), d_x.cols());
      d_col.noalias() = enc.stages[l].weight.transpose() * d_x;
      ActBatchT<T> d_in;
      d_in.channels = fwd.taps[l - 1].channels;
      d_in.height = fwd.taps[l - 1].height;
      d_in.width = fwd.taps[l - 1].width;
      d_in.count = B;
      d_in.data = std::move(cache.bwd_dtap[l - 1]);
      d_in.data.resize(d_in.channels, B * d_in.spatial());
      detail::col2im_3x3s2(d_col, d_in);
      cache.bwd_dtap[l - 1] = std::move(d_in.data);
    }
  }
  (void)input;
}

}  // namespace mimic
