#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "stretchnas/autodiff/tensor.hpp"

namespace stretchnas::optimization {

using ad::Real;
using ad::Tensor;

using GradList = std::vector<std::vector<Real>>;

// Scales all gradients so their joint L2 norm is at most max_norm.
inline double clip_grad_norm(GradList& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads)
    for (Real v : g) sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double factor = max_norm / (norm + 1e-6);
    for (auto& g : grads)
      for (auto& v : g) v = static_cast<Real>(v * factor);
  }
  return norm;
}

inline double cosine_lr(double lr_max, double lr_min, int epoch, int epochs) {
  if (epochs <= 0) return lr_max;
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * epoch / epochs));
}

/// Momentum SGD with L2 weight decay added to the gradient:
/// v = mu v + (g + wd w); w -= lr v.
class Sgd {
 public:
  Sgd() = default;
  Sgd(const std::vector<Tensor>& params, double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params) velocity_.emplace_back(p.numel(), Real{0});
  }

  void step(std::vector<Tensor>& params, const GradList& grads, double lr) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto w = params[k].mutable_data();
      auto& v = velocity_.at(k);
      const auto& g = grads.at(k);
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double d = static_cast<double>(g[i]) + weight_decay_ * w[i];
        v[i] = static_cast<Real>(momentum_ * v[i] + d);
        w[i] = static_cast<Real>(w[i] - lr * v[i]);
      }
    }
  }

  GradList& velocity() { return velocity_; }
  const GradList& velocity() const { return velocity_; }

 private:
  double momentum_ = 0.9;
  double weight_decay_ = 0;
  GradList velocity_;
};

/// Adam with L2 weight decay added to the gradient and bias correction.
class Adam {
 public:
  Adam() = default;
  Adam(const std::vector<Tensor>& params, double beta1, double beta2, double weight_decay, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {
    for (const auto& p : params) {
      m_.emplace_back(p.numel(), Real{0});
      v_.emplace_back(p.numel(), Real{0});
    }
  }

  void step(std::vector<Tensor>& params, const GradList& grads, double lr) {
    ++steps_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto w = params[k].mutable_data();
      auto& m = m_.at(k);
      auto& v = v_.at(k);
      const auto& g = grads.at(k);
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double d = static_cast<double>(g[i]) + weight_decay_ * w[i];
        m[i] = static_cast<Real>(beta1_ * m[i] + (1.0 - beta1_) * d);
        v[i] = static_cast<Real>(beta2_ * v[i] + (1.0 - beta2_) * d * d);
        const double m_hat = m[i] / c1;
        const double v_hat = v[i] / c2;
        w[i] = static_cast<Real>(w[i] - lr * m_hat / (std::sqrt(v_hat) + eps_));
      }
    }
  }

  GradList& first_moment() { return m_; }
  GradList& second_moment() { return v_; }
  const GradList& first_moment() const { return m_; }
  const GradList& second_moment() const { return v_; }
  long long steps() const { return steps_; }
  void set_steps(long long steps) { steps_ = steps; }

 private:
  double beta1_ = 0.5;
  double beta2_ = 0.999;
  double weight_decay_ = 0;
  double eps_ = 1e-8;
  long long steps_ = 0;
  GradList m_;
  GradList v_;
};

}  // namespace stretchnas::optimization
