#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "ditflow/kernels.hpp"
#include "ditflow/rng.hpp"

using namespace ditflow;
using kernels::Isa;

namespace {

template <typename T>
std::vector<T> random_vec(Rng& rng, std::size_t n) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-1.0, 1.0));
  return v;
}

template <typename T>
double max_rel(const std::vector<T>& a, const std::vector<T>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(double(a[i]) - double(b[i])) / std::max(1.0, std::abs(double(b[i])));
    worst = std::max(worst, d);
  }
  return worst;
}

template <typename T>
void check_equivalence(const kernels::KernelTable<T>& simd, double tol) {
  const auto& ref = *kernels::table_for<T>(Isa::scalar);
  Rng rng(7);
  const std::size_t sizes[] = {1, 3, 7, 8, 9, 16, 31, 33, 64, 100};
  for (std::size_t n : sizes) {
    auto a = random_vec<T>(rng, n), b = random_vec<T>(rng, n);
    CHECK(std::abs(double(simd.dot(a.data(), b.data(), n)) - double(ref.dot(a.data(), b.data(), n))) <= tol * n);

    auto y1 = random_vec<T>(rng, n);
    auto y2 = y1;
    simd.axpy(T(0.37), a.data(), y1.data(), n);
    ref.axpy(T(0.37), a.data(), y2.data(), n);
    CHECK(max_rel(y1, y2) <= tol);

    auto s1 = std::vector<T>(n), s2 = std::vector<T>(n);
    auto logits = random_vec<T>(rng, n);
    for (auto& l : logits) l *= T(20);
    simd.softmax_row(logits.data(), s1.data(), n, T(2));
    ref.softmax_row(logits.data(), s2.data(), n, T(2));
    CHECK(max_rel(s1, s2) <= 10 * tol);

    auto x = random_vec<T>(rng, n);
    for (auto& v : x) v *= T(6);
    auto g1 = std::vector<T>(n), g2 = std::vector<T>(n);
    simd.gelu(x.data(), g1.data(), n);
    ref.gelu(x.data(), g2.data(), n);
    CHECK(max_rel(g1, g2) <= 1e-6);
    auto up = random_vec<T>(rng, n);
    auto gx1 = random_vec<T>(rng, n);
    auto gx2 = gx1;
    simd.gelu_grad(x.data(), up.data(), gx1.data(), n);
    ref.gelu_grad(x.data(), up.data(), gx2.data(), n);
    CHECK(max_rel(gx1, gx2) <= 1e-6);

    CHECK(simd.all_finite(x.data(), n));
    for (T bad : {std::numeric_limits<T>::quiet_NaN(), std::numeric_limits<T>::infinity(),
                  -std::numeric_limits<T>::infinity()}) {
      auto y = x;
      y[n - 1] = bad;
      CHECK_FALSE(simd.all_finite(y.data(), n));
      CHECK_FALSE(ref.all_finite(y.data(), n));
      y[n - 1] = x[n - 1];
      y[0] = bad;
      CHECK_FALSE(simd.all_finite(y.data(), n));
    }
  }
  const std::size_t shapes[][3] = {{1, 1, 1}, {4, 16, 8}, {5, 17, 3}, {8, 64, 64}, {13, 9, 21}, {256, 16, 16}};
  for (const auto& [m, n, k] : shapes) {
    auto a = random_vec<T>(rng, m * k), b = random_vec<T>(rng, k * n), bt = random_vec<T>(rng, n * k);
    auto at = random_vec<T>(rng, k * m);
    auto c0 = random_vec<T>(rng, m * n);
    for (int variant = 0; variant < 3; ++variant) {
      auto c1 = c0, c2 = c0;
      if (variant == 0) {
        simd.gemm_nn(m, n, k, a.data(), b.data(), c1.data());
        ref.gemm_nn(m, n, k, a.data(), b.data(), c2.data());
      } else if (variant == 1) {
        simd.gemm_nt(m, n, k, a.data(), bt.data(), c1.data());
        ref.gemm_nt(m, n, k, a.data(), bt.data(), c2.data());
      } else {
        simd.gemm_tn(m, n, k, at.data(), b.data(), c1.data());
        ref.gemm_tn(m, n, k, at.data(), b.data(), c2.data());
      }
      CHECK(max_rel(c1, c2) <= tol * k);
    }
  }
}

}  // namespace

TEST_CASE("scalar table is always available") {
  REQUIRE(kernels::table_for<float>(Isa::scalar) != nullptr);
  REQUIRE(kernels::table_for<double>(Isa::scalar) != nullptr);
}

TEST_CASE("SIMD kernels agree with the scalar reference") {
  for (Isa isa : {Isa::avx2, Isa::neon}) {
    const auto* f = kernels::table_for<float>(isa);
    const auto* d = kernels::table_for<double>(isa);
    if (f == nullptr) {
      MESSAGE("skipping unavailable ISA " << kernels::isa_name(isa));
      continue;
    }
    SUBCASE("f32") { check_equivalence(*f, 2e-6); }
    SUBCASE("f64") { check_equivalence(*d, 1e-14); }
  }
}

TEST_CASE("softmax row handles large logits without overflow") {
  for (Isa isa : {Isa::scalar, Isa::avx2, Isa::neon}) {
    const auto* t = kernels::table_for<float>(isa);
    if (t == nullptr) continue;
    std::vector<float> in(19, 0.0f), out(19);
    in[4] = 500.0f;
    t->softmax_row(in.data(), out.data(), in.size(), 4.0f);
    CHECK(out[4] == doctest::Approx(1.0f));
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(std::isfinite(out[i]));
  }
}

TEST_CASE("ScopedIsa pins and restores the active table") {
  const Isa before = kernels::active_isa();
  {
    kernels::ScopedIsa pin(Isa::scalar);
    CHECK(pin.ok());
    CHECK(kernels::active_isa() == Isa::scalar);
  }
  CHECK(kernels::active_isa() == before);
}
