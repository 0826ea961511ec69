#include "ditflow/kernels.hpp"

#include <cmath>

namespace ditflow::kernels::detail {
namespace {

template <typename T>
T dot_scalar(const T* a, const T* b, std::size_t n) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void axpy_scalar(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void gemm_nn_scalar(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) axpy_scalar(a[i * k + p], b + p * n, crow, n);
  }
}

template <typename T>
void gemm_nt_scalar(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] += dot_scalar(a + i * k, b + j * k, k);
}

template <typename T>
void gemm_tn_scalar(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t i = 0; i < m; ++i) axpy_scalar(a[p * m + i], b + p * n, c + i * n, n);
}

template <typename T>
void softmax_row_scalar(const T* in, T* out, std::size_t n, T scale) {
  if (n == 0) return;
  T hi = scale * in[0];
  for (std::size_t i = 1; i < n; ++i) hi = std::max(hi, scale * in[i]);
  T sum = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(scale * in[i] - hi);
    sum += out[i];
  }
  const T inv = T(1) / sum;
  for (std::size_t i = 0; i < n; ++i) out[i] *= inv;
}

template <typename T>
void gelu_scalar(const T* x, T* out, std::size_t n) {
  const T inv_sqrt2 = T(0.70710678118654752440);
  for (std::size_t i = 0; i < n; ++i) out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
}

template <typename T>
void gelu_grad_scalar(const T* x, const T* g, T* gx, std::size_t n) {
  const T inv_sqrt2 = T(0.70710678118654752440);
  const T inv_sqrt_2pi = T(0.39894228040143267794);
  for (std::size_t i = 0; i < n; ++i) {
    const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
    const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x[i] * x[i]);
    gx[i] += g[i] * (cdf + x[i] * pdf);
  }
}

template <typename T>
bool all_finite_scalar(const T* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(x[i])) return false;
  return true;
}

template <typename T>
constexpr KernelTable<T> make_table() {
  return {&dot_scalar<T>,          &axpy_scalar<T>, &gemm_nn_scalar<T>,     &gemm_nt_scalar<T>,
          &gemm_tn_scalar<T>,      &softmax_row_scalar<T>, &gelu_scalar<T>, &gelu_grad_scalar<T>,
          &all_finite_scalar<T>};
}

constexpr KernelTable<float> kScalarF32 = make_table<float>();
constexpr KernelTable<double> kScalarF64 = make_table<double>();

}  // namespace

const KernelTable<float>* scalar_f32() noexcept { return &kScalarF32; }
const KernelTable<double>* scalar_f64() noexcept { return &kScalarF64; }

}  // namespace ditflow::kernels::detail
