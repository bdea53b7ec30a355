#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "kanet/tensor.hpp"

namespace kanet {

/// lr(t) = lr0 * (1 + cos(pi * t / T)) / 2, clamped to [0, T].
inline double cosine_annealed_lr(std::size_t step, std::size_t total_steps, double lr0) {
  if (total_steps == 0) return lr0;
  const double t = static_cast<double>(std::min(step, total_steps));
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * t / static_cast<double>(total_steps)));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adam with bias correction over a fixed list of parameter tensors.
template <std::floating_point T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>*> params, AdamConfig config = {}) : params_(std::move(params)), config_(config) {
    for (const auto* p : params_) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }

  /// One update with learning rate `lr`; grads align with the parameter list.
  void step(const std::vector<Tensor<T>>& grads, double lr) {
    if (grads.size() != params_.size()) throw ArgumentError("adam: gradient count mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto p = params_[i]->data();
      auto g = grads[i].data();
      if (g.size() != p.size()) throw DimensionError("adam: gradient shape mismatch");
      for (std::size_t j = 0; j < p.size(); ++j) {
        double gj = static_cast<double>(g[j]);
        if (config_.weight_decay != 0.0) gj += config_.weight_decay * static_cast<double>(p[j]);
        m_[i][j] = config_.beta1 * m_[i][j] + (1.0 - config_.beta1) * gj;
        v_[i][j] = config_.beta2 * v_[i][j] + (1.0 - config_.beta2) * gj * gj;
        const double update = lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + config_.eps);
        p[j] = static_cast<T>(static_cast<double>(p[j]) - update);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor<T>*> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace kanet
