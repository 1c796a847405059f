#pragma once

#include <cmath>
#include <vector>

#include "mimic/common.hpp"
#include "mimic/encoder.hpp"

namespace mimic {

/// SGD with momentum and optional L2 weight decay; the training loops pair it
/// with a cosine-decayed learning rate.
template <class T>
class SgdT {
 public:
  SgdT(double momentum, double weight_decay) : momentum_(T(momentum)), wd_(T(weight_decay)) {}

  void step(std::vector<ParamViewT<T>> params, std::vector<ParamViewT<T>> grads, double lr) {
    if (velocity_.empty()) {
      velocity_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i)
        velocity_[i] = VecX<T>::Zero(params[i].size);
    }
    const T eta = T(lr);
    for (size_t i = 0; i < params.size(); ++i) {
      T* p = params[i].data;
      const T* g = grads[i].data;
      T* v = velocity_[i].data();
      const int64_t n = params[i].size;
      for (int64_t k = 0; k < n; ++k) {
        T gk = g[k] + wd_ * p[k];
        v[k] = momentum_ * v[k] + gk;
        p[k] -= eta * v[k];
      }
    }
  }

 private:
  T momentum_, wd_;
  std::vector<VecX<T>> velocity_;
};

using Sgd = SgdT<float>;

inline double cosine_lr(double base_lr, int64_t step, int64_t total_steps) {
  if (total_steps <= 1) return base_lr;
  double t = double(step) / double(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

/// Adam for the MINE statistics networks.
template <class T>
class AdamT {
 public:
  AdamT(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(std::vector<ParamViewT<T>> params, std::vector<ParamViewT<T>> grads) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        m_[i] = VecX<T>::Zero(params[i].size);
        v_[i] = VecX<T>::Zero(params[i].size);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, t_);
    const double bc2 = 1.0 - std::pow(b2_, t_);
    for (size_t i = 0; i < params.size(); ++i) {
      T* p = params[i].data;
      const T* g = grads[i].data;
      T* m = m_[i].data();
      T* v = v_[i].data();
      const int64_t n = params[i].size;
      for (int64_t k = 0; k < n; ++k) {
        m[k] = T(b1_) * m[k] + T(1.0 - b1_) * g[k];
        v[k] = T(b2_) * v[k] + T(1.0 - b2_) * g[k] * g[k];
        double mhat = double(m[k]) / bc1;
        double vhat = double(v[k]) / bc2;
        p[k] -= T(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  int64_t t_ = 0;
  std::vector<VecX<T>> m_, v_;
};

using Adam = AdamT<float>;

}  // namespace mimic
