#pragma once

// First-order optimizers over tensor leaves. A parameter with no gradient
// buffer is skipped entirely, so an untouched parameter never drifts.

#include <cmath>
#include <cstdint>
#include <vector>

#include "slcn/tensor.hpp"

namespace slcn {

enum class OptimKind { sgd_momentum, adam };

struct OptimConfig {
  OptimKind kind = OptimKind::sgd_momentum;
  double lr = 0.01;
  double momentum = 0.9;       // sgd
  double beta1 = 0.9;          // adam
  double beta2 = 0.999;        // adam
  double eps = 1e-8;           // adam
  double weight_decay = 0.0;   // additive: g + wd * p
};

template <class T>
class Optimizer {
 public:
  Optimizer(std::vector<Tensor<T>> params, OptimConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    if (!(cfg_.lr >= 0.0)) throw Error("optimizer: lr must be >= 0");
    state_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto n = params_[i].data().size();
      state_[i].velocity.assign(n, T(0));
      if (cfg_.kind == OptimKind::adam) state_[i].second.assign(n, T(0));
    }
  }

  void step() {
    ++t_;
    const T lr = static_cast<T>(cfg_.lr);
    const T wd = static_cast<T>(cfg_.weight_decay);
    if (cfg_.kind == OptimKind::sgd_momentum) {
      const T mu = static_cast<T>(cfg_.momentum);
      for (std::size_t i = 0; i < params_.size(); ++i) {
        if (!params_[i].has_grad()) continue;
        auto& p = params_[i].data();
        const auto& g = params_[i].grad();
        auto& v = state_[i].velocity;
        for (std::size_t j = 0; j < p.size(); ++j) {
          T gj = g[j] + wd * p[j];
          v[j] = mu * v[j] + gj;
          p[j] -= lr * v[j];
        }
      }
    } else {
      const T b1 = static_cast<T>(cfg_.beta1);
      const T b2 = static_cast<T>(cfg_.beta2);
      const T eps = static_cast<T>(cfg_.eps);
      const T c1 = T(1) - static_cast<T>(std::pow(cfg_.beta1, static_cast<double>(t_)));
      const T c2 = T(1) - static_cast<T>(std::pow(cfg_.beta2, static_cast<double>(t_)));
      for (std::size_t i = 0; i < params_.size(); ++i) {
        if (!params_[i].has_grad()) continue;
        auto& p = params_[i].data();
        const auto& g = params_[i].grad();
        auto& m = state_[i].velocity;
        auto& v = state_[i].second;
        for (std::size_t j = 0; j < p.size(); ++j) {
          T gj = g[j] + wd * p[j];
          m[j] = b1 * m[j] + (T(1) - b1) * gj;
          v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
          T mhat = m[j] / c1;
          T vhat = v[j] / c2;
          p[j] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) {
    if (!(lr >= 0.0)) throw Error("optimizer: lr must be >= 0");
    cfg_.lr = lr;
  }

 private:
  struct State {
    std::vector<T> velocity;  // adam reuses this slot for the first moment
    std::vector<T> second;
  };
  std::vector<Tensor<T>> params_;
  OptimConfig cfg_;
  std::vector<State> state_;
  std::int64_t t_ = 0;
};

}  // namespace slcn
