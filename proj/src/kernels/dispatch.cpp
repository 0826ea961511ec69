#include "ditflow/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

namespace ditflow::kernels {
namespace {

bool cpu_has(Isa isa) noexcept {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if defined(__x86_64__) || defined(_M_X64)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Isa::neon:
#if defined(__aarch64__)
      return true;
#else
      return false;
#endif
  }
  return false;
}

Isa initial_isa() noexcept {
  // DITFLOW_ISA=scalar forces the reference kernels for a whole process.
  if (const char* env = std::getenv("DITFLOW_ISA")) {
    const std::string want(env);
    if (want == "scalar") return Isa::scalar;
    if (want == "avx2" && cpu_has(Isa::avx2)) return Isa::avx2;
    if (want == "neon" && cpu_has(Isa::neon)) return Isa::neon;
  }
  return detect_isa();
}

std::atomic<Isa>& current() noexcept {
  static std::atomic<Isa> isa{initial_isa()};
  return isa;
}

}  // namespace

std::string_view isa_name(Isa isa) noexcept {
  switch (isa) {
    case Isa::scalar:
      return "scalar";
    case Isa::avx2:
      return "avx2";
    case Isa::neon:
      return "neon";
  }
  return "unknown";
}

Isa detect_isa() noexcept {
  if (cpu_has(Isa::avx2) && detail::avx2_f32() != nullptr) return Isa::avx2;
  if (cpu_has(Isa::neon) && detail::neon_f32() != nullptr) return Isa::neon;
  return Isa::scalar;
}

template <>
const KernelTable<float>* table_for<float>(Isa isa) noexcept {
  if (!cpu_has(isa)) return nullptr;
  switch (isa) {
    case Isa::scalar:
      return detail::scalar_f32();
    case Isa::avx2:
      return detail::avx2_f32();
    case Isa::neon:
      return detail::neon_f32();
  }
  return nullptr;
}

template <>
const KernelTable<double>* table_for<double>(Isa isa) noexcept {
  if (!cpu_has(isa)) return nullptr;
  switch (isa) {
    case Isa::scalar:
      return detail::scalar_f64();
    case Isa::avx2:
      return detail::avx2_f64();
    case Isa::neon:
      return detail::neon_f64();
  }
  return nullptr;
}

Isa active_isa() noexcept { return current().load(std::memory_order_relaxed); }

bool set_active_isa(Isa isa) noexcept {
  if (table_for<float>(isa) == nullptr) return false;
  current().store(isa, std::memory_order_relaxed);
  return true;
}

template <>
const KernelTable<float>& active<float>() noexcept {
  return *table_for<float>(active_isa());
}

template <>
const KernelTable<double>& active<double>() noexcept {
  return *table_for<double>(active_isa());
}

}  // namespace ditflow::kernels
