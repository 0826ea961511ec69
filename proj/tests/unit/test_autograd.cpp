#include <doctest.h>

#include <cmath>
#include <cstring>
#include <string>

#include "ditflow/autograd.hpp"
#include "ditflow/gradcheck.hpp"
#include "ditflow/gradsuite.hpp"
#include "ditflow/rng.hpp"

using namespace ditflow;
using namespace ditflow::ag;

namespace {

Tensor<double> rand_t(Rng& rng, Shape dims, double lo = -1.0, double hi = 1.0) {
  return rng.uniform_tensor<double>(std::move(dims), lo, hi);
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
  Tape<double> tape;
  auto y = softmax(tape.constant(Tensor<double>({3}, 0.0)));
  for (double v : y.value().values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("identity matmul returns its operand") {
  Rng rng(1);
  Tape<double> tape;
  Tensor<double> eye({3, 3});
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  auto a = rand_t(rng, {3, 3});
  auto c = matmul(tape.constant(eye), tape.constant(a));
  CHECK(c.value() == a);
}

TEST_CASE("layer norm rows have zero mean and unit variance") {
  Rng rng(2);
  Tape<double> tape;
  auto x = tape.constant(rand_t(rng, {4, 8}, -3.0, 3.0));
  auto y = layer_norm(x, tape.constant(Tensor<double>({8}, 1.0)), tape.constant(Tensor<double>({8}, 0.0)), 1e-12);
  for (std::size_t r = 0; r < 4; ++r) {
    double mean = 0, var = 0;
    for (std::size_t i = 0; i < 8; ++i) mean += y.value()[r * 8 + i];
    mean /= 8;
    for (std::size_t i = 0; i < 8; ++i) var += std::pow(y.value()[r * 8 + i] - mean, 2);
    var /= 8;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("product rule on scalars") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::scalar(2.0), true);
  auto y = tape.leaf(Tensor<double>::scalar(3.0), true);
  auto f = sum(mul(x, y));
  tape.backward(f);
  CHECK(tape.grad(x)[0] == 3.0);
  CHECK(tape.grad(y)[0] == 2.0);
}

TEST_CASE("gradient of a sum of squares") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({2}, std::vector<double>{1.0, -2.0}), true);
  tape.backward(sum_squares(x));
  CHECK(tape.grad(x)[0] == 2.0);
  CHECK(tape.grad(x)[1] == -4.0);
}

TEST_CASE("softmax-then-dot gradient matches central differences") {
  Rng rng(3);
  const auto w = rand_t(rng, {5});
  ScalarFn fn = [&](Tape<double>& tape, Var<double> x) { return sum(mul(softmax(x, 1.0), tape.constant(w))); };
  CHECK(finite_diff_check(fn, rand_t(rng, {5}), 1e-5) < 1e-6);
}

TEST_CASE("finite_diff_check contract") {
  ScalarFn quad = [](Tape<double>&, Var<double> x) { return sum_squares(x); };
  Rng rng(4);
  CHECK(finite_diff_check(quad, rand_t(rng, {6}), 1e-5) < 1e-9);
  CHECK_THROWS_AS(finite_diff_check(quad, rand_t(rng, {6}), 0.0), std::invalid_argument);

  int calls = 0;
  ScalarFn flaky = [&](Tape<double>& tape, Var<double> x) {
    ++calls;
    return add(sum_squares(x), tape.constant(Tensor<double>::scalar(calls)));
  };
  CHECK_THROWS_AS(finite_diff_check(flaky, rand_t(rng, {2}), 1e-5), std::invalid_argument);
}

TEST_CASE("every op's gradient matches finite differences on random instances") {
  const auto cases = op_gradient_suite(11, 50);
  CHECK(cases.size() == 50 * 22);
  for (const auto& c : cases) {
    INFO("op " << c.name);
    CHECK(c.max_relative_error < 1e-5);
  }
}

TEST_CASE("backward is linear in the output") {
  Rng rng(5);
  const auto x0 = rand_t(rng, {3, 4});
  const auto w = rand_t(rng, {4, 2});
  auto f = [&](Tape<double>& t, Var<double> x) { return sum_squares(matmul(x, t.constant(w))); };
  auto g = [&](Tape<double>&, Var<double> x) { return sum(gelu(x)); };
  auto grad_of = [&](auto&& fn) {
    Tape<double> t;
    auto x = t.leaf(x0, true);
    t.backward(fn(t, x));
    return t.grad(x);
  };
  const double a = 0.7, b = -2.3;
  const auto gf = grad_of(f), gg = grad_of(g);
  const auto gc = grad_of([&](Tape<double>& t, Var<double> x) { return add(scale(f(t, x), a), scale(g(t, x), b)); });
  for (std::size_t i = 0; i < gc.size(); ++i) CHECK(std::abs(gc[i] - (a * gf[i] + b * gg[i])) < 1e-10);
}

TEST_CASE("forward is bit-reproducible") {
  auto run = [] {
    Rng rng(9);
    Tape<float> t;
    auto x = t.constant(rng.normal_tensor<float>({8, 16}));
    auto w = t.constant(rng.normal_tensor<float>({16, 16}));
    auto g = t.constant(Tensor<float>({16}, 1.0f));
    auto b = t.constant(Tensor<float>({16}, 0.0f));
    return softmax(gelu(layer_norm(matmul(x, w), g, b)), 2.0f).value();
  };
  CHECK(bit_identical(run(), run()));
}

TEST_CASE("shape and finiteness errors") {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}));
  auto b = tape.constant(Tensor<double>({2, 3}));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, tape.constant(Tensor<double>({2}))), ShapeError);
  Tensor<double> bad({2}, 0.0);
  bad[1] = std::nan("");
  CHECK_THROWS_AS(tape.leaf(bad, true), NonFiniteError);
  auto x = tape.leaf(Tensor<double>({2}, 1.0), true);
  CHECK_THROWS_AS(tape.backward(scale(x, 2.0)), ShapeError);
}

TEST_CASE("leaves off the backward path receive zero gradients") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({2}, 1.0), true);
  auto unused = tape.leaf(Tensor<double>({3}, 1.0), true);
  tape.backward(sum_squares(x));
  const auto g = tape.grad(unused);
  REQUIRE(g.size() == 3);
  for (double v : g.values()) CHECK(v == 0.0);
}

TEST_CASE("ops on constants are not recorded for backward") {
  Tape<float> tape;
  auto a = tape.constant(Tensor<float>({2, 2}, 1.0f));
  auto c = matmul(a, a);
  CHECK_FALSE(c.requires_grad());
  CHECK(tape.inputs(c.id()).empty());
}
