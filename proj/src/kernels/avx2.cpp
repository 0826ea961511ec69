#include "ditflow/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#define DITFLOW_HAVE_AVX2_KERNELS 1
#include <immintrin.h>

#include <cmath>
#include <vector>
#endif

namespace ditflow::kernels::detail {

#if DITFLOW_HAVE_AVX2_KERNELS

// Functions carry their own target attribute instead of building the whole
// translation unit with -mavx2, so no inline helper shared with scalar code
// can be emitted with VEX encodings.
#define DITFLOW_AVX2 __attribute__((target("avx2,fma")))

namespace {

DITFLOW_AVX2 inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 shuf = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, shuf);
  shuf = _mm_movehl_ps(shuf, sums);
  sums = _mm_add_ss(sums, shuf);
  return _mm_cvtss_f32(sums);
}

DITFLOW_AVX2 inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d high64 = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, high64));
}

// exp for x <= 0 (post max-subtraction), Cephes polynomial, ~1 ulp.
DITFLOW_AVX2 inline __m256 exp_nonpos(__m256 x) {
  const __m256 lo = _mm256_set1_ps(-87.0f);
  x = _mm256_max_ps(x, lo);
  __m256 fx = _mm256_fmadd_ps(x, _mm256_set1_ps(1.44269504088896341f), _mm256_set1_ps(0.5f));
  fx = _mm256_floor_ps(fx);
  x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(0.693359375f), x);
  x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(-2.12194440e-4f), x);
  const __m256 z = _mm256_mul_ps(x, x);
  __m256 y = _mm256_set1_ps(1.9875691500e-4f);
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.3981999507e-3f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(8.3334519073e-3f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(4.1665795894e-2f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.6666665459e-1f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(5.0000001201e-1f));
  y = _mm256_fmadd_ps(y, z, x);
  y = _mm256_add_ps(y, _mm256_set1_ps(1.0f));
  __m256i n = _mm256_cvttps_epi32(fx);
  n = _mm256_add_epi32(n, _mm256_set1_epi32(127));
  n = _mm256_slli_epi32(n, 23);
  return _mm256_mul_ps(y, _mm256_castsi256_ps(n));
}

DITFLOW_AVX2 float dot_f32(const float* a, const float* b, std::size_t n) {
  __m256 acc0 = _mm256_setzero_ps(), acc1 = _mm256_setzero_ps();
  __m256 acc2 = _mm256_setzero_ps(), acc3 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 32 <= n; i += 32) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
    acc2 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 16), _mm256_loadu_ps(b + i + 16), acc2);
    acc3 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 24), _mm256_loadu_ps(b + i + 24), acc3);
  }
  for (; i + 8 <= n; i += 8) acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
  float acc = hsum(_mm256_add_ps(_mm256_add_ps(acc0, acc1), _mm256_add_ps(acc2, acc3)));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

DITFLOW_AVX2 double dot_f64(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

DITFLOW_AVX2 void axpy_f32(float alpha, const float* x, float* y, std::size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

DITFLOW_AVX2 void axpy_f64(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

// C += A*B with a 4-row x 16-column register tile; C stays in registers
// across the k loop.
DITFLOW_AVX2 void gemm_nn_f32(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b,
                              float* c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    std::size_t j = 0;
    for (; j + 16 <= n; j += 16) {
      __m256 c00 = _mm256_loadu_ps(c + (i + 0) * n + j), c01 = _mm256_loadu_ps(c + (i + 0) * n + j + 8);
      __m256 c10 = _mm256_loadu_ps(c + (i + 1) * n + j), c11 = _mm256_loadu_ps(c + (i + 1) * n + j + 8);
      __m256 c20 = _mm256_loadu_ps(c + (i + 2) * n + j), c21 = _mm256_loadu_ps(c + (i + 2) * n + j + 8);
      __m256 c30 = _mm256_loadu_ps(c + (i + 3) * n + j), c31 = _mm256_loadu_ps(c + (i + 3) * n + j + 8);
      for (std::size_t p = 0; p < k; ++p) {
        const __m256 b0 = _mm256_loadu_ps(b + p * n + j);
        const __m256 b1 = _mm256_loadu_ps(b + p * n + j + 8);
        __m256 av = _mm256_broadcast_ss(a + (i + 0) * k + p);
        c00 = _mm256_fmadd_ps(av, b0, c00);
        c01 = _mm256_fmadd_ps(av, b1, c01);
        av = _mm256_broadcast_ss(a + (i + 1) * k + p);
        c10 = _mm256_fmadd_ps(av, b0, c10);
        c11 = _mm256_fmadd_ps(av, b1, c11);
        av = _mm256_broadcast_ss(a + (i + 2) * k + p);
        c20 = _mm256_fmadd_ps(av, b0, c20);
        c21 = _mm256_fmadd_ps(av, b1, c21);
        av = _mm256_broadcast_ss(a + (i + 3) * k + p);
        c30 = _mm256_fmadd_ps(av, b0, c30);
        c31 = _mm256_fmadd_ps(av, b1, c31);
      }
      _mm256_storeu_ps(c + (i + 0) * n + j, c00);
      _mm256_storeu_ps(c + (i + 0) * n + j + 8, c01);
      _mm256_storeu_ps(c + (i + 1) * n + j, c10);
      _mm256_storeu_ps(c + (i + 1) * n + j + 8, c11);
      _mm256_storeu_ps(c + (i + 2) * n + j, c20);
      _mm256_storeu_ps(c + (i + 2) * n + j + 8, c21);
      _mm256_storeu_ps(c + (i + 3) * n + j, c30);
      _mm256_storeu_ps(c + (i + 3) * n + j + 8, c31);
    }
    if (j < n) {
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t p = 0; p < k; ++p) axpy_f32(a[(i + r) * k + p], b + p * n + j, c + (i + r) * n + j, n - j);
    }
  }
  for (; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) axpy_f32(a[i * k + p], b + p * n, c + i * n, n);
}

DITFLOW_AVX2 void gemm_nn_f64(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                              double* c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
      __m256d c00 = _mm256_loadu_pd(c + (i + 0) * n + j), c01 = _mm256_loadu_pd(c + (i + 0) * n + j + 4);
      __m256d c10 = _mm256_loadu_pd(c + (i + 1) * n + j), c11 = _mm256_loadu_pd(c + (i + 1) * n + j + 4);
      __m256d c20 = _mm256_loadu_pd(c + (i + 2) * n + j), c21 = _mm256_loadu_pd(c + (i + 2) * n + j + 4);
      __m256d c30 = _mm256_loadu_pd(c + (i + 3) * n + j), c31 = _mm256_loadu_pd(c + (i + 3) * n + j + 4);
      for (std::size_t p = 0; p < k; ++p) {
        const __m256d b0 = _mm256_loadu_pd(b + p * n + j);
        const __m256d b1 = _mm256_loadu_pd(b + p * n + j + 4);
        __m256d av = _mm256_broadcast_sd(a + (i + 0) * k + p);
        c00 = _mm256_fmadd_pd(av, b0, c00);
        c01 = _mm256_fmadd_pd(av, b1, c01);
        av = _mm256_broadcast_sd(a + (i + 1) * k + p);
        c10 = _mm256_fmadd_pd(av, b0, c10);
        c11 = _mm256_fmadd_pd(av, b1, c11);
        av = _mm256_broadcast_sd(a + (i + 2) * k + p);
        c20 = _mm256_fmadd_pd(av, b0, c20);
        c21 = _mm256_fmadd_pd(av, b1, c21);
        av = _mm256_broadcast_sd(a + (i + 3) * k + p);
        c30 = _mm256_fmadd_pd(av, b0, c30);
        c31 = _mm256_fmadd_pd(av, b1, c31);
      }
      _mm256_storeu_pd(c + (i + 0) * n + j, c00);
      _mm256_storeu_pd(c + (i + 0) * n + j + 4, c01);
      _mm256_storeu_pd(c + (i + 1) * n + j, c10);
      _mm256_storeu_pd(c + (i + 1) * n + j + 4, c11);
      _mm256_storeu_pd(c + (i + 2) * n + j, c20);
      _mm256_storeu_pd(c + (i + 2) * n + j + 4, c21);
      _mm256_storeu_pd(c + (i + 3) * n + j, c30);
      _mm256_storeu_pd(c + (i + 3) * n + j + 4, c31);
    }
    if (j < n) {
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t p = 0; p < k; ++p) axpy_f64(a[(i + r) * k + p], b + p * n + j, c + (i + r) * n + j, n - j);
    }
  }
  for (; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) axpy_f64(a[i * k + p], b + p * n, c + i * n, n);
}

// The transposed variants repack the transposed operand and reuse the nn tile.
template <typename T>
void transpose_into(const T* src, std::size_t rows, std::size_t cols, std::vector<T>& dst) {
  dst.resize(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

void gemm_nt_f32(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
  thread_local std::vector<float> bt;
  transpose_into(b, n, k, bt);
  gemm_nn_f32(m, n, k, a, bt.data(), c);
}

void gemm_nt_f64(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  thread_local std::vector<double> bt;
  transpose_into(b, n, k, bt);
  gemm_nn_f64(m, n, k, a, bt.data(), c);
}

void gemm_tn_f32(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
  thread_local std::vector<float> at;
  transpose_into(a, k, m, at);
  gemm_nn_f32(m, n, k, at.data(), b, c);
}

void gemm_tn_f64(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  thread_local std::vector<double> at;
  transpose_into(a, k, m, at);
  gemm_nn_f64(m, n, k, at.data(), b, c);
}

DITFLOW_AVX2 void softmax_row_f32(const float* in, float* out, std::size_t n, float scale) {
  if (n == 0) return;
  const __m256 vs = _mm256_set1_ps(scale);
  float hi = scale * in[0];
  std::size_t i = 0;
  if (n >= 8) {
    __m256 vmax = _mm256_mul_ps(vs, _mm256_loadu_ps(in));
    for (i = 8; i + 8 <= n; i += 8) vmax = _mm256_max_ps(vmax, _mm256_mul_ps(vs, _mm256_loadu_ps(in + i)));
    alignas(32) float lanes[8];
    _mm256_store_ps(lanes, vmax);
    for (float v : lanes) hi = v > hi ? v : hi;
  }
  for (; i < n; ++i) hi = scale * in[i] > hi ? scale * in[i] : hi;

  const __m256 vhi = _mm256_set1_ps(hi);
  __m256 vsum = _mm256_setzero_ps();
  i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 e = exp_nonpos(_mm256_fmsub_ps(vs, _mm256_loadu_ps(in + i), vhi));
    _mm256_storeu_ps(out + i, e);
    vsum = _mm256_add_ps(vsum, e);
  }
  float sum = hsum(vsum);
  for (; i < n; ++i) {
    out[i] = std::exp(scale * in[i] - hi);
    sum += out[i];
  }
  const __m256 vinv = _mm256_set1_ps(1.0f / sum);
  i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(out + i, _mm256_mul_ps(vinv, _mm256_loadu_ps(out + i)));
  const float inv = 1.0f / sum;
  for (; i < n; ++i) out[i] *= inv;
}

// Double precision only backs the verification paths; exp stays scalar.
DITFLOW_AVX2 void softmax_row_f64(const double* in, double* out, std::size_t n, double scale) {
  if (n == 0) return;
  double hi = scale * in[0];
  for (std::size_t i = 1; i < n; ++i) hi = scale * in[i] > hi ? scale * in[i] : hi;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(scale * in[i] - hi);
    sum += out[i];
  }
  const __m256d vinv = _mm256_set1_pd(1.0 / sum);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, _mm256_mul_pd(vinv, _mm256_loadu_pd(out + i)));
  const double inv = 1.0 / sum;
  for (; i < n; ++i) out[i] *= inv;
}

// erf for x >= 0, Abramowitz-Stegun 7.1.26 (abs error < 1.5e-7); also
// returns exp(-x^2) for reuse.
DITFLOW_AVX2 inline __m256 erf_nonneg(__m256 x) {
  const __m256 t = _mm256_div_ps(_mm256_set1_ps(1.0f), _mm256_fmadd_ps(_mm256_set1_ps(0.3275911f), x, _mm256_set1_ps(1.0f)));
  __m256 poly = _mm256_set1_ps(1.061405429f);
  poly = _mm256_fmadd_ps(poly, t, _mm256_set1_ps(-1.453152027f));
  poly = _mm256_fmadd_ps(poly, t, _mm256_set1_ps(1.421413741f));
  poly = _mm256_fmadd_ps(poly, t, _mm256_set1_ps(-0.284496736f));
  poly = _mm256_fmadd_ps(poly, t, _mm256_set1_ps(0.254829592f));
  poly = _mm256_mul_ps(poly, t);
  const __m256 e = exp_nonpos(_mm256_sub_ps(_mm256_setzero_ps(), _mm256_mul_ps(x, x)));
  return _mm256_fnmadd_ps(poly, e, _mm256_set1_ps(1.0f));
}

// Phi(x) = 0.5 (1 + erf(x / sqrt 2)), odd symmetry handled by sign select.
DITFLOW_AVX2 inline __m256 normal_cdf(__m256 x) {
  const __m256 sign_mask = _mm256_set1_ps(-0.0f);
  const __m256 ax = _mm256_andnot_ps(sign_mask, x);
  const __m256 erf_abs = erf_nonneg(_mm256_mul_ps(ax, _mm256_set1_ps(0.70710678118654752f)));
  const __m256 erf_signed = _mm256_or_ps(erf_abs, _mm256_and_ps(sign_mask, x));
  return _mm256_mul_ps(_mm256_set1_ps(0.5f), _mm256_add_ps(_mm256_set1_ps(1.0f), erf_signed));
}

DITFLOW_AVX2 void gelu_f32(const float* x, float* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    _mm256_storeu_ps(out + i, _mm256_mul_ps(v, normal_cdf(v)));
  }
  for (; i < n; ++i) out[i] = 0.5f * x[i] * (1.0f + std::erf(x[i] * 0.70710678118654752f));
}

DITFLOW_AVX2 void gelu_grad_f32(const float* x, const float* g, float* gx, std::size_t n) {
  std::size_t i = 0;
  const __m256 inv_sqrt_2pi = _mm256_set1_ps(0.39894228040143268f);
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    const __m256 pdf =
        _mm256_mul_ps(inv_sqrt_2pi, exp_nonpos(_mm256_mul_ps(_mm256_set1_ps(-0.5f), _mm256_mul_ps(v, v))));
    const __m256 d = _mm256_fmadd_ps(v, pdf, normal_cdf(v));
    _mm256_storeu_ps(gx + i, _mm256_fmadd_ps(_mm256_loadu_ps(g + i), d, _mm256_loadu_ps(gx + i)));
  }
  for (; i < n; ++i) {
    const float cdf = 0.5f * (1.0f + std::erf(x[i] * 0.70710678118654752f));
    const float pdf = 0.39894228040143268f * std::exp(-0.5f * x[i] * x[i]);
    gx[i] += g[i] * (cdf + x[i] * pdf);
  }
}

void gelu_f64(const double* x, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * 0.70710678118654752440));
}

void gelu_grad_f64(const double* x, const double* g, double* gx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const double cdf = 0.5 * (1.0 + std::erf(x[i] * 0.70710678118654752440));
    const double pdf = 0.39894228040143267794 * std::exp(-0.5 * x[i] * x[i]);
    gx[i] += g[i] * (cdf + x[i] * pdf);
  }
}

// Exponent field all ones <=> NaN or infinity.
DITFLOW_AVX2 bool all_finite_f32(const float* x, std::size_t n) {
  const __m256i exp_mask = _mm256_set1_epi32(0x7F800000);
  __m256i bad = _mm256_setzero_si256();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256i bits = _mm256_and_si256(_mm256_loadu_si256(reinterpret_cast<const __m256i*>(x + i)), exp_mask);
    bad = _mm256_or_si256(bad, _mm256_cmpeq_epi32(bits, exp_mask));
  }
  if (!_mm256_testz_si256(bad, bad)) return false;
  for (; i < n; ++i)
    if (!std::isfinite(x[i])) return false;
  return true;
}

DITFLOW_AVX2 bool all_finite_f64(const double* x, std::size_t n) {
  const __m256i exp_mask = _mm256_set1_epi64x(0x7FF0000000000000ll);
  __m256i bad = _mm256_setzero_si256();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256i bits = _mm256_and_si256(_mm256_loadu_si256(reinterpret_cast<const __m256i*>(x + i)), exp_mask);
    bad = _mm256_or_si256(bad, _mm256_cmpeq_epi64(bits, exp_mask));
  }
  if (!_mm256_testz_si256(bad, bad)) return false;
  for (; i < n; ++i)
    if (!std::isfinite(x[i])) return false;
  return true;
}

const KernelTable<float> kAvx2F32{&dot_f32,         &axpy_f32, &gemm_nn_f32,      &gemm_nt_f32,  &gemm_tn_f32,
                                  &softmax_row_f32, &gelu_f32, &gelu_grad_f32,    &all_finite_f32};
const KernelTable<double> kAvx2F64{&dot_f64,         &axpy_f64, &gemm_nn_f64,   &gemm_nt_f64,   &gemm_tn_f64,
                                   &softmax_row_f64, &gelu_f64, &gelu_grad_f64, &all_finite_f64};

}  // namespace

const KernelTable<float>* avx2_f32() noexcept { return &kAvx2F32; }
const KernelTable<double>* avx2_f64() noexcept { return &kAvx2F64; }

#else

const KernelTable<float>* avx2_f32() noexcept { return nullptr; }
const KernelTable<double>* avx2_f64() noexcept { return nullptr; }

#endif

}  // namespace ditflow::kernels::detail
