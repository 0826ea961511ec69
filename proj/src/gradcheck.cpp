#include "ditflow/gradcheck.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace ditflow {
namespace {

double evaluate(const ScalarFn& fn, const Tensor<double>& x) {
  ag::Tape<double> tape;
  auto out = fn(tape, tape.leaf(x, false));
  if (out.value().size() != 1) throw ShapeError("finite_diff_check: function is not scalar-valued");
  return out.value()[0];
}

}  // namespace

GradCheckResult finite_diff_report(const ScalarFn& fn, const Tensor<double>& point, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be positive");
  const double first = evaluate(fn, point);
  const double second = evaluate(fn, point);
  if (std::memcmp(&first, &second, sizeof(double)) != 0)
    throw std::invalid_argument("finite_diff_check: function is not deterministic");

  ag::Tape<double> tape;
  auto x = tape.leaf(point, true);
  auto out = fn(tape, x);
  tape.backward(out);
  const Tensor<double> analytic = tape.grad(x);

  GradCheckResult result;
  Tensor<double> probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = evaluate(fn, probe);
    probe[i] = orig - eps;
    const double down = evaluate(fn, probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(std::abs(analytic[i]), 1e-8);
    if (err > result.max_relative_error || i == 0) {
      result.max_relative_error = err;
      result.worst_index = i;
      result.analytic = analytic[i];
      result.numeric = numeric;
    }
  }
  return result;
}

}  // namespace ditflow
