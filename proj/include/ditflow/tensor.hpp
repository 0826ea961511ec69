#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "ditflow/errors.hpp"

namespace ditflow {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& dims) noexcept;
std::string to_string(const Shape& dims);

/// Dense row-major real array with an optional gradient slot.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape dims, T fill = T(0));
  Tensor(Shape dims, std::vector<T> values);

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }
  T* data() noexcept { return values_.data(); }
  const T* data() const noexcept { return values_.data(); }
  std::vector<T>& storage() noexcept { return values_; }
  const std::vector<T>& storage() const noexcept { return values_; }

  T& operator[](std::size_t i) noexcept { return values_[i]; }
  T operator[](std::size_t i) const noexcept { return values_[i]; }

  /// Value of a single-element tensor.
  T item() const;

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool on) noexcept { requires_grad_ = on; }

  bool has_grad() const noexcept { return !grad_.empty(); }
  std::span<const T> grad() const noexcept { return grad_; }
  std::vector<T>& grad_storage() noexcept { return grad_; }
  void zero_grad() { grad_.assign(values_.size(), T(0)); }
  void clear_grad() noexcept { grad_.clear(); }
  Tensor grad_tensor() const;

  /// Same values under new extents with equal element count.
  Tensor reshaped(Shape dims) const;

  bool all_finite() const noexcept;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(values_.begin(), values_.end());
    return Tensor<U>(dims_, std::move(out));
  }

  bool operator==(const Tensor& other) const noexcept {
    return dims_ == other.dims_ && values_ == other.values_;
  }

 private:
  Shape dims_;
  std::vector<T> values_;
  std::vector<T> grad_;
  bool requires_grad_ = false;
};

/// Throws NonFiniteError naming `what` if any value is NaN or infinite.
template <typename T>
void require_finite(const Tensor<T>& t, const std::string& what);

/// Bitwise comparison of values (distinguishes -0/+0, NaN payloads).
template <typename T>
bool bit_identical(const Tensor<T>& a, const Tensor<T>& b) noexcept;

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace ditflow
