#pragma once

// Dense inner-loop kernels with a scalar reference path and SIMD variants.
//
// Every kernel exists once per instruction set. The scalar table is the
// reference: SIMD tables must agree with it up to floating-point
// reassociation, which tests/test_kernels.cpp checks. The active table is
// chosen once at startup from CPU feature bits and can be pinned for tests.

#include <cstddef>
#include <string_view>

namespace ditflow::kernels {

enum class Isa { scalar, avx2, neon };

std::string_view isa_name(Isa isa) noexcept;

template <typename T>
struct KernelTable {
  // sum_i a[i] * b[i]
  T (*dot)(const T* a, const T* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(T alpha, const T* x, T* y, std::size_t n);
  // C[m,n] += A[m,k] * B[k,n]
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
  // C[m,n] += A[m,k] * B[n,k]^T
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
  // C[m,n] += A[k,m]^T * B[k,n]
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
  // out = softmax(scale * in) over n contiguous entries, max-subtracted
  void (*softmax_row)(const T* in, T* out, std::size_t n, T scale);
  // out = x * Phi(x)
  void (*gelu)(const T* x, T* out, std::size_t n);
  // gx += g * d/dx [x * Phi(x)]
  void (*gelu_grad)(const T* x, const T* g, T* gx, std::size_t n);
  // true when no element is NaN or infinite
  bool (*all_finite)(const T* x, std::size_t n);
};

/// Tables for a given ISA. Returns nullptr when the ISA was not compiled in
/// or the running CPU lacks it.
template <typename T>
const KernelTable<T>* table_for(Isa isa) noexcept;

/// Best ISA the running CPU supports among those compiled in.
Isa detect_isa() noexcept;

/// Currently selected ISA (detect_isa() unless overridden).
Isa active_isa() noexcept;

/// Pin the active ISA. Returns false (and changes nothing) if unavailable.
bool set_active_isa(Isa isa) noexcept;

template <typename T>
const KernelTable<T>& active() noexcept;

/// RAII override of the active ISA, restoring the previous one on exit.
class ScopedIsa {
 public:
  explicit ScopedIsa(Isa isa) noexcept : previous_(active_isa()), ok_(set_active_isa(isa)) {}
  ~ScopedIsa() { set_active_isa(previous_); }
  ScopedIsa(const ScopedIsa&) = delete;
  ScopedIsa& operator=(const ScopedIsa&) = delete;
  bool ok() const noexcept { return ok_; }

 private:
  Isa previous_;
  bool ok_;
};

namespace detail {
const KernelTable<float>* scalar_f32() noexcept;
const KernelTable<double>* scalar_f64() noexcept;
const KernelTable<float>* avx2_f32() noexcept;
const KernelTable<double>* avx2_f64() noexcept;
const KernelTable<float>* neon_f32() noexcept;
const KernelTable<double>* neon_f64() noexcept;
}  // namespace detail

}  // namespace ditflow::kernels
