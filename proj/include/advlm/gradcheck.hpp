// SPDX-License-Identifier: Apache-2.0
//
// Central finite differences, used as the reference for reverse-mode
// gradients.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "advlm/tensor.hpp"

namespace advlm::gradcheck {

/// Numerical gradient of `loss` w.r.t. every value of `x`. `loss` must read
/// x's current values; they are restored afterwards.
inline std::vector<double> numeric_grad(Tensor x, const std::function<double()>& loss,
                                        double step = 1e-4) {
  std::vector<double> g(x.size());
  auto v = x.mutable_values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double saved = v[i];
    v[i] = saved + step;
    const double up = loss();
    v[i] = saved - step;
    const double down = loss();
    v[i] = saved;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

/// max_i |a_i - b_i| / max(1, max_i |b_i|)
inline double rel_err(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, scale = 1.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return diff / scale;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace advlm::gradcheck
