#pragma once

#include <functional>

#include "ditflow/autograd.hpp"

namespace ditflow {

/// Scalar-valued function of one tensor, built on the tape it is given.
using ScalarFn = std::function<ag::Var<double>(ag::Tape<double>&, ag::Var<double>)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the tape gradient of `fn` at `point` with central differences.
/// Error per coordinate is |analytic - numeric| / max(|analytic|, 1e-8).
/// Throws if eps <= 0 or fn is not bit-reproducible at `point`.
GradCheckResult finite_diff_report(const ScalarFn& fn, const Tensor<double>& point, double eps);

inline double finite_diff_check(const ScalarFn& fn, const Tensor<double>& point, double eps) {
  return finite_diff_report(fn, point, eps).max_relative_error;
}

}  // namespace ditflow
