#pragma once

// Central finite-difference verification of tape gradients.
//
// Meant to run on double tensors: probe noise at float precision drowns the
// O(eps^2) truncation term.

#include <cmath>
#include <limits>
#include <vector>

#include "slcn/tensor.hpp"

namespace slcn {

/// Max relative error between tape gradients and central differences, over
/// every coordinate of every leaf with requires_grad. `fn` maps the leaves to
/// a scalar and is re-evaluated with perturbed data, so it must not cache
/// forward results. Any NaN encountered yields +infinity.
template <class T, class Fn>
double grad_check(Fn&& fn, std::vector<Tensor<T>>& leaves, T eps) {
  for (auto& p : leaves) p.zero_grad();
  Tensor<T> y = fn(leaves);
  if (y.numel() != 1) throw Error("grad_check: function must return a scalar");
  std::vector<std::vector<T>> analytic(leaves.size());
  if (y.requires_grad()) {
    y.backward();
    for (std::size_t i = 0; i < leaves.size(); ++i)
      analytic[i] = leaves[i].has_grad() ? leaves[i].grad()
                                         : std::vector<T>(leaves[i].data().size(), T(0));
  } else {
    for (std::size_t i = 0; i < leaves.size(); ++i)
      analytic[i].assign(leaves[i].data().size(), T(0));
  }

  NoGradGuard ng;
  double max_err = 0.0;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    if (!leaves[i].requires_grad()) continue;
    auto& values = leaves[i].data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      T orig = values[j];
      values[j] = orig + eps;
      double fp = static_cast<double>(fn(leaves).item());
      values[j] = orig - eps;
      double fm = static_cast<double>(fn(leaves).item());
      values[j] = orig;
      double numeric = (fp - fm) / (2.0 * static_cast<double>(eps));
      double exact = static_cast<double>(analytic[i][j]);
      if (std::isnan(numeric) || std::isnan(exact))
        return std::numeric_limits<double>::infinity();
      // The floor keeps central-difference rounding noise (~1e-12 for O(1)
      // objectives at eps 1e-5) from dominating coordinates whose true
      // gradient is zero or near zero.
      double denom = std::max({std::fabs(exact), std::fabs(numeric), 1e-6});
      max_err = std::max(max_err, std::fabs(exact - numeric) / denom);
    }
  }
  return max_err;
}

/// True when one evaluation of `fn` keeps every ReLU input and every pooling
/// decision at least `margin` away from its kink. Finite-difference probes at
/// such points stay on one linear piece.
template <class T, class Fn>
bool kink_free(Fn&& fn, std::vector<Tensor<T>>& leaves, double margin = 1e-3) {
  NoGradGuard ng;
  KinkWatch watch;
  (void)fn(leaves);
  return KinkWatch::min_margin() >= margin;
}

}  // namespace slcn
