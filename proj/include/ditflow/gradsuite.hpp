#pragma once

// Finite-difference gradient suites shared by the tests, the grad-check
// subcommand and the acceptance run. All checks run in double precision.

#include <cstdint>
#include <string>
#include <vector>

namespace ditflow {

struct GradCase {
  std::string suite;  // "ops", "amf" or "end_to_end"
  std::string name;
  double max_relative_error = 0.0;
  double tolerance = 0.0;

  bool passed() const { return max_relative_error < tolerance; }
};

/// Every autograd op on `trials` random instances; tolerance 1e-5.
std::vector<GradCase> op_gradient_suite(std::uint64_t seed, std::size_t trials = 20);

/// L_AMF w.r.t. head-averaged Q and K at F = 2, S = 4, through the batched and
/// the per-pair routes; tolerance 1e-4.
std::vector<GradCase> amf_gradient_suite(std::uint64_t seed, std::size_t trials = 10);

/// L_AMF w.r.t. the latent and the embedding delta through a random 2-block
/// model (F = 2, S = 4), capturing at each block; tolerance 1e-3.
std::vector<GradCase> end_to_end_gradient_suite(std::uint64_t seed);

/// Worst case per (suite, name), in first-seen order.
std::vector<GradCase> worst_per_case(const std::vector<GradCase>& cases);

}  // namespace ditflow
