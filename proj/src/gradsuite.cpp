#include "ditflow/gradsuite.hpp"

#include <algorithm>
#include <functional>
#include <optional>

#include "ditflow/amf.hpp"
#include "ditflow/gradcheck.hpp"
#include "ditflow/guidance.hpp"
#include "ditflow/rng.hpp"

namespace ditflow {

using ag::Tape;
using ag::Var;

namespace {

constexpr double kOpTolerance = 1e-5;
constexpr double kAmfTolerance = 1e-4;
constexpr double kEndToEndTolerance = 1e-3;

Tensor<double> rand_t(Rng& rng, Shape dims, double lo = -1.0, double hi = 1.0) {
  return rng.uniform_tensor<double>(std::move(dims), lo, hi);
}

// Fixed random projection so every output coordinate reaches the scalar.
Var<double> project(Tape<double>& tape, Var<double> v, std::uint64_t seed) {
  Rng rng(seed);
  return ag::sum(ag::mul(v, tape.constant(rand_t(rng, v.dims()))));
}

amf::MotionFlow random_hard_flow(Rng& rng, std::size_t frames, const amf::PatchGrid& g) {
  auto flow = amf::MotionFlow::zeros(amf::FlowMode::hard, frames, g);
  for (std::size_t i = 0; i < frames; ++i)
    for (std::size_t j = 0; j < frames; ++j)
      for (std::size_t p = 0; p < g.size(); ++p) {
        const auto tu = rng.uniform_int(0, std::int64_t(g.cols) - 1);
        const auto tv = rng.uniform_int(0, std::int64_t(g.rows) - 1);
        flow.delta[flow.offset(i, j, p)] = double(tu) - double(g.u(p));
        flow.delta[flow.offset(i, j, p) + 1] = double(tv) - double(g.v(p));
      }
  return flow;
}

}  // namespace

std::vector<GradCase> op_gradient_suite(std::uint64_t seed, std::size_t trials) {
  using namespace ag;
  Rng rng(seed);
  std::vector<GradCase> out;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const std::size_t m = 1 + rng.uniform_int(0, 3), k = 1 + rng.uniform_int(0, 3), n = 1 + rng.uniform_int(0, 3);
    const std::uint64_t pseed = rng.next_u64();
    const auto other = rand_t(rng, {m, k});
    const auto rhs = rand_t(rng, {k, n});
    const auto batched_rhs = rand_t(rng, {2, k, n});
    const auto row = rand_t(rng, {k});
    const auto gamma = rand_t(rng, {k}, 0.5, 1.5);
    const auto beta = rand_t(rng, {k});
    const double temp = rng.uniform(0.5, 3.0);
    const Tensor<double> ln_gamma({k + 1}, 1.3), ln_beta({k + 1}, 0.2);

    struct Case {
      const char* name;
      Shape dims;
      ScalarFn fn;
    };
    const std::vector<Case> cases = {
        {"matmul lhs", {m, k}, [&](Tape<double>& t, Var<double> x) { return project(t, matmul(x, t.constant(rhs)), pseed); }},
        {"matmul rhs", {k, n}, [&](Tape<double>& t, Var<double> x) { return project(t, matmul(t.constant(other), x), pseed); }},
        {"batched matmul", {2, m, k},
         [&](Tape<double>& t, Var<double> x) { return project(t, matmul(x, t.constant(batched_rhs)), pseed); }},
        {"shared-rhs matmul", {2, m, k},
         [&](Tape<double>& t, Var<double> x) { return project(t, matmul(x, t.constant(rhs)), pseed); }},
        {"transpose", {2, m, k}, [&](Tape<double>& t, Var<double> x) { return project(t, transpose(x), pseed); }},
        {"add broadcast lhs", {m, k}, [&](Tape<double>& t, Var<double> x) { return project(t, add(x, t.constant(row)), pseed); }},
        {"add broadcast rhs", {k}, [&](Tape<double>& t, Var<double> x) { return project(t, add(t.constant(other), x), pseed); }},
        {"sub rhs", {m, k}, [&](Tape<double>& t, Var<double> x) { return project(t, sub(t.constant(other), x), pseed); }},
        {"scale", {m, k}, [&](Tape<double>& t, Var<double> x) { return project(t, scale(x, -1.7), pseed); }},
        {"mul both", {m, k}, [&](Tape<double>& t, Var<double> x) { return project(t, mul(x, x), pseed); }},
        {"mul broadcast rhs", {k}, [&](Tape<double>& t, Var<double> x) { return project(t, mul(t.constant(other), x), pseed); }},
        {"softmax", {m, k}, [&](Tape<double>& t, Var<double> x) { return project(t, softmax(x, temp), pseed); }},
        {"layer_norm x", {m, k + 1},
         [&](Tape<double>& t, Var<double> x) {
           return project(t, layer_norm(x, t.constant(ln_gamma), t.constant(ln_beta)), pseed);
         }},
        {"layer_norm gamma", {k},
         [&](Tape<double>& t, Var<double> x) { return project(t, layer_norm(t.constant(other), x, t.constant(beta)), pseed); }},
        {"layer_norm beta", {k},
         [&](Tape<double>& t, Var<double> x) { return project(t, layer_norm(t.constant(other), t.constant(gamma), x), pseed); }},
        {"gelu", {m, k}, [&](Tape<double>& t, Var<double> x) { return project(t, gelu(scale(x, 2.0)), pseed); }},
        {"reshape", {m, k}, [&](Tape<double>& t, Var<double> x) { return project(t, reshape(x, {k, m}), pseed); }},
        {"permute", {2, m, k}, [&](Tape<double>& t, Var<double> x) { return project(t, permute(x, {2, 0, 1}), pseed); }},
        {"gather_rows", {m, k},
         [&](Tape<double>& t, Var<double> x) { return project(t, gather_rows(x, {m - 1, 0, m - 1}), pseed); }},
        {"mean_axis", {2, m, k}, [&](Tape<double>& t, Var<double> x) { return project(t, mean_axis(x, 1), pseed); }},
        {"sum", {m, k}, [&](Tape<double>&, Var<double> x) { return scale(sum(mul(x, x)), 0.5); }},
        {"sum_squares", {m, k}, [&](Tape<double>&, Var<double> x) { return sum_squares(x); }},
    };
    for (const auto& c : cases)
      out.push_back({"ops", c.name, finite_diff_check(c.fn, rand_t(rng, c.dims), 1e-5), kOpTolerance});
  }
  return out;
}

std::vector<GradCase> amf_gradient_suite(std::uint64_t seed, std::size_t trials) {
  const std::size_t f = 2, dh = 3;
  const amf::PatchGrid grid{2, 2};
  const double tau = 2.0;
  Rng rng(seed);
  std::vector<GradCase> out;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const auto ref = random_hard_flow(rng, f, grid);
    const auto q = rng.normal_tensor<double>({f * grid.size(), dh});
    const auto k = rng.normal_tensor<double>({f * grid.size(), dh});
    ScalarFn wrt_q = [&](Tape<double>& t, Var<double> x) {
      return amf::amf_loss(ref, amf::soft_amf(x, t.constant(k), f, grid, tau));
    };
    ScalarFn wrt_k = [&](Tape<double>& t, Var<double> x) {
      return amf::amf_loss(ref, amf::soft_amf(t.constant(q), x, f, grid, tau));
    };
    ScalarFn pair_q = [&](Tape<double>& t, Var<double> x) { return amf::amf_loss_pairwise(ref, x, t.constant(k), tau); };
    ScalarFn pair_k = [&](Tape<double>& t, Var<double> x) { return amf::amf_loss_pairwise(ref, t.constant(q), x, tau); };
    out.push_back({"amf", "d/dQ batched", finite_diff_check(wrt_q, q, 1e-5), kAmfTolerance});
    out.push_back({"amf", "d/dK batched", finite_diff_check(wrt_k, k, 1e-5), kAmfTolerance});
    out.push_back({"amf", "d/dQ per-pair", finite_diff_check(pair_q, q, 1e-5), kAmfTolerance});
    out.push_back({"amf", "d/dK per-pair", finite_diff_check(pair_k, k, 1e-5), kAmfTolerance});
  }
  return out;
}

std::vector<GradCase> end_to_end_gradient_suite(std::uint64_t seed) {
  ModelConfig mc;
  mc.frames = 2;
  mc.height = 4;
  mc.width = 4;
  mc.patch = 2;
  mc.dim = 16;
  mc.heads = 2;
  mc.blocks = 2;
  mc.steps = 10;
  mc.cond_vocab = 3;
  DiTModel<double> model(mc, seed);
  Rng rng(derive_seed(seed, "end_to_end"));
  const auto grid = amf::grid_of(mc);
  const auto ref = random_hard_flow(rng, mc.frames, grid);
  const auto z = rng.normal_tensor<double>(mc.latent_shape());
  const auto delta = rng.normal_tensor<double>(model.posemb().base.dims(), 0.1);
  guidance::GuidanceConfig g;
  g.k_opt = 0;
  g.inject_kv = false;
  const KVCache<double>* no_kv = nullptr;
  const std::size_t step = 7, cond = 1;
  std::vector<GradCase> out;
  for (std::size_t block = 0; block < mc.blocks; ++block) {
    g.block = block;
    ScalarFn wrt_z = [&](Tape<double>& t, Var<double> x) {
      return guidance::guidance_loss(t, model, model.bind(t, false), x, std::optional(t.constant(delta)), step, cond,
                                     ref, g, no_kv);
    };
    ScalarFn wrt_delta = [&](Tape<double>& t, Var<double> x) {
      return guidance::guidance_loss(t, model, model.bind(t, false), t.constant(z), std::optional(x), step, cond, ref,
                                     g, no_kv);
    };
    const std::string suffix = " (block " + std::to_string(block) + ")";
    out.push_back({"end_to_end", "d/dz_t" + suffix, finite_diff_check(wrt_z, z, 1e-6), kEndToEndTolerance});
    out.push_back({"end_to_end", "d/drho_delta" + suffix, finite_diff_check(wrt_delta, delta, 1e-6), kEndToEndTolerance});
  }
  return out;
}

std::vector<GradCase> worst_per_case(const std::vector<GradCase>& cases) {
  std::vector<GradCase> out;
  for (const auto& c : cases) {
    auto it = std::find_if(out.begin(), out.end(), [&](const GradCase& o) { return o.suite == c.suite && o.name == c.name; });
    if (it == out.end())
      out.push_back(c);
    else
      it->max_relative_error = std::max(it->max_relative_error, c.max_relative_error);
  }
  return out;
}

}  // namespace ditflow
