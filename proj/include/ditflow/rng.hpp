#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "ditflow/tensor.hpp"

namespace ditflow {

std::uint64_t splitmix64(std::uint64_t x) noexcept;

/// Independent child seed for a named consumer of a run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) noexcept;
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) noexcept;

/// mt19937_64 with portable uniform/normal draws (no std distributions,
/// whose output is implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  /// Standard normal via Box-Muller.
  double normal();

  template <typename T>
  Tensor<T> normal_tensor(Shape dims, double stddev = 1.0) {
    Tensor<T> t(std::move(dims));
    for (auto& v : t.values()) v = static_cast<T>(stddev * normal());
    return t;
  }
  template <typename T>
  Tensor<T> uniform_tensor(Shape dims, double lo, double hi) {
    Tensor<T> t(std::move(dims));
    for (auto& v : t.values()) v = static_cast<T>(uniform(lo, hi));
    return t;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace ditflow
