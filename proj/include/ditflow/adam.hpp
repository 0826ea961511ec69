#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "ditflow/errors.hpp"
#include "ditflow/tensor.hpp"

namespace ditflow {

/// Adam moments for one optimization target.
template <typename T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  std::size_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit AdamState(std::size_t n = 0) : m(n, T(0)), v(n, T(0)) {}

  void reset() {
    std::fill(m.begin(), m.end(), T(0));
    std::fill(v.begin(), v.end(), T(0));
    step = 0;
  }

  /// One bias-corrected update of `target` in place.
  void update(std::span<T> target, std::span<const T> grad, double lr) {
    if (target.size() != m.size() || grad.size() != m.size())
      throw ShapeError("adam: target of " + std::to_string(target.size()) + " values, gradient of " +
                       std::to_string(grad.size()) + ", state of " + std::to_string(m.size()));
    ++step;
    const double c1 = 1.0 - std::pow(beta1, double(step));
    const double c2 = 1.0 - std::pow(beta2, double(step));
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double g = double(grad[i]);
      const double mi = beta1 * double(m[i]) + (1.0 - beta1) * g;
      const double vi = beta2 * double(v[i]) + (1.0 - beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      target[i] = static_cast<T>(double(target[i]) - lr * (mi / c1) / (std::sqrt(vi / c2) + eps));
    }
  }
};

}  // namespace ditflow
