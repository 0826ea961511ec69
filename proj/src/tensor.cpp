#include "ditflow/tensor.hpp"

#include "ditflow/kernels.hpp"

#include <cstring>
#include <sstream>

namespace ditflow {

std::size_t numel(const Shape& dims) noexcept {
  std::size_t n = 1;
  for (std::size_t d : dims) n *= d;
  return n;
}

std::string to_string(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape dims, T fill) : dims_(std::move(dims)), values_(numel(dims_), fill) {
  for (std::size_t d : dims_)
    if (d == 0) throw ShapeError("tensor extents must be positive, got " + to_string(dims_));
}

template <typename T>
Tensor<T>::Tensor(Shape dims, std::vector<T> values) : dims_(std::move(dims)), values_(std::move(values)) {
  for (std::size_t d : dims_)
    if (d == 0) throw ShapeError("tensor extents must be positive, got " + to_string(dims_));
  if (numel(dims_) != values_.size())
    throw ShapeError("tensor " + to_string(dims_) + " needs " + std::to_string(numel(dims_)) + " values, got " +
                     std::to_string(values_.size()));
}

template <typename T>
T Tensor<T>::item() const {
  if (values_.size() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(dims_));
  return values_[0];
}

template <typename T>
Tensor<T> Tensor<T>::grad_tensor() const {
  if (grad_.empty()) return Tensor(dims_);
  return Tensor(dims_, grad_);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape dims) const {
  if (numel(dims) != values_.size())
    throw ShapeError("cannot reshape " + to_string(dims_) + " to " + to_string(dims));
  return Tensor(std::move(dims), values_);
}

template <typename T>
bool Tensor<T>::all_finite() const noexcept {
  return kernels::active<T>().all_finite(values_.data(), values_.size());
}

template <typename T>
void require_finite(const Tensor<T>& t, const std::string& what) {
  if (!t.all_finite()) throw NonFiniteError(what + ": non-finite value in tensor " + to_string(t.dims()));
}

template <typename T>
bool bit_identical(const Tensor<T>& a, const Tensor<T>& b) noexcept {
  return a.dims() == b.dims() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

template class Tensor<float>;
template class Tensor<double>;
template void require_finite(const Tensor<float>&, const std::string&);
template void require_finite(const Tensor<double>&, const std::string&);
template bool bit_identical(const Tensor<float>&, const Tensor<float>&) noexcept;
template bool bit_identical(const Tensor<double>&, const Tensor<double>&) noexcept;

}  // namespace ditflow
