#include "ditflow/kernels.hpp"

#if defined(__aarch64__)
#define DITFLOW_HAVE_NEON_KERNELS 1
#include <arm_neon.h>

#include <cmath>
#endif

namespace ditflow::kernels::detail {

#if DITFLOW_HAVE_NEON_KERNELS

namespace {

float dot_f32(const float* a, const float* b, std::size_t n) {
  float32x4_t acc0 = vdupq_n_f32(0.0f), acc1 = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = vfmaq_f32(acc0, vld1q_f32(a + i), vld1q_f32(b + i));
    acc1 = vfmaq_f32(acc1, vld1q_f32(a + i + 4), vld1q_f32(b + i + 4));
  }
  float acc = vaddvq_f32(vaddq_f32(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

double dot_f64(const double* a, const double* b, std::size_t n) {
  float64x2_t acc0 = vdupq_n_f64(0.0), acc1 = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
    acc1 = vfmaq_f64(acc1, vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
  }
  double acc = vaddvq_f64(vaddq_f64(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy_f32(float alpha, const float* x, float* y, std::size_t n) {
  const float32x4_t va = vdupq_n_f32(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(y + i, vfmaq_f32(vld1q_f32(y + i), va, vld1q_f32(x + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void axpy_f64(double alpha, const double* x, double* y, std::size_t n) {
  const float64x2_t va = vdupq_n_f64(alpha);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), va, vld1q_f64(x + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T, void (*Axpy)(T, const T*, T*, std::size_t)>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) Axpy(a[i * k + p], b + p * n, c + i * n, n);
}

template <typename T, T (*Dot)(const T*, const T*, std::size_t)>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] += Dot(a + i * k, b + j * k, k);
}

template <typename T, void (*Axpy)(T, const T*, T*, std::size_t)>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t i = 0; i < m; ++i) Axpy(a[p * m + i], b + p * n, c + i * n, n);
}

template <typename T>
void softmax_row(const T* in, T* out, std::size_t n, T scale) {
  if (n == 0) return;
  T hi = scale * in[0];
  for (std::size_t i = 1; i < n; ++i) hi = scale * in[i] > hi ? scale * in[i] : hi;
  T sum = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(scale * in[i] - hi);
    sum += out[i];
  }
  const T inv = T(1) / sum;
  for (std::size_t i = 0; i < n; ++i) out[i] *= inv;
}

template <typename T>
void gelu(const T* x, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * T(0.70710678118654752440)));
}

template <typename T>
void gelu_grad(const T* x, const T* g, T* gx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const T cdf = T(0.5) * (T(1) + std::erf(x[i] * T(0.70710678118654752440)));
    const T pdf = T(0.39894228040143267794) * std::exp(T(-0.5) * x[i] * x[i]);
    gx[i] += g[i] * (cdf + x[i] * pdf);
  }
}

template <typename T>
bool all_finite(const T* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(x[i])) return false;
  return true;
}

const KernelTable<float> kNeonF32{&dot_f32,
                                  &axpy_f32,
                                  &gemm_nn<float, &axpy_f32>,
                                  &gemm_nt<float, &dot_f32>,
                                  &gemm_tn<float, &axpy_f32>,
                                  &softmax_row<float>,
                                  &gelu<float>,
                                  &gelu_grad<float>,
                                  &all_finite<float>};
const KernelTable<double> kNeonF64{&dot_f64,
                                   &axpy_f64,
                                   &gemm_nn<double, &axpy_f64>,
                                   &gemm_nt<double, &dot_f64>,
                                   &gemm_tn<double, &axpy_f64>,
                                   &softmax_row<double>,
                                   &gelu<double>,
                                   &gelu_grad<double>,
                                   &all_finite<double>};

}  // namespace

const KernelTable<float>* neon_f32() noexcept { return &kNeonF32; }
const KernelTable<double>* neon_f64() noexcept { return &kNeonF64; }

#else

const KernelTable<float>* neon_f32() noexcept { return nullptr; }
const KernelTable<double>* neon_f64() noexcept { return nullptr; }

#endif

}  // namespace ditflow::kernels::detail
