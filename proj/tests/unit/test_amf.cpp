#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "ditflow/amf.hpp"
#include "ditflow/errors.hpp"
#include "ditflow/gradcheck.hpp"
#include "ditflow/rng.hpp"
#include "ditflow/vtns.hpp"

using namespace ditflow;
using namespace ditflow::amf;

namespace {

const PatchGrid kGrid4{2, 2};
const PatchGrid kGrid64{8, 8};

CrossFrameAttention<double> from_matrix(const PatchGrid& g, std::vector<double> a) {
  return {0, 1, 2.0, Tensor<double>({g.size(), g.size()}, std::move(a))};
}

std::vector<double> identity(std::size_t s) {
  std::vector<double> a(s * s, 0.0);
  for (std::size_t p = 0; p < s; ++p) a[p * s + p] = 1.0;
  return a;
}

double row_entropy_mean(const Tensor<double>& a) {
  const std::size_t s = a.dim(0), t = a.dim(1);
  double h = 0.0;
  for (std::size_t r = 0; r < s; ++r)
    for (std::size_t c = 0; c < t; ++c) {
      const double p = a[r * t + c];
      if (p > 0) h -= p * std::log(p);
    }
  return h / double(s);
}

MotionFlow random_hard_flow(Rng& rng, std::size_t frames, const PatchGrid& g) {
  auto flow = MotionFlow::zeros(FlowMode::hard, frames, g);
  for (std::size_t i = 0; i < frames; ++i)
    for (std::size_t j = 0; j < frames; ++j)
      for (std::size_t p = 0; p < g.size(); ++p) {
        const auto tu = rng.uniform_int(0, std::int64_t(g.cols) - 1), tv = rng.uniform_int(0, std::int64_t(g.rows) - 1);
        flow.delta[flow.offset(i, j, p)] = double(tu) - double(g.u(p));
        flow.delta[flow.offset(i, j, p) + 1] = double(tv) - double(g.v(p));
      }
  return flow;
}

}  // namespace

TEST_CASE("cross-frame attention: scaled orthonormal rows give near identity") {
  const std::size_t s = 4, dk = 4;
  Tensor<double> q({s, dk});
  for (std::size_t p = 0; p < s; ++p) q[p * dk + p] = 10.0;
  auto a = cross_frame_attention(q, q, 2.0).a;
  for (std::size_t p = 0; p < s; ++p) CHECK(a[p * s + p] > 0.99);
}

TEST_CASE("cross-frame attention: zero queries give uniform rows") {
  Rng rng(1);
  Tensor<double> q({64, 16});
  auto k = rng.normal_tensor<double>({64, 16});
  auto a = cross_frame_attention(q, k, 2.0).a;
  for (double x : a.values()) CHECK(x == doctest::Approx(1.0 / 64).epsilon(1e-12));
}

TEST_CASE("cross-frame attention: rows are stochastic, tau must be positive") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto q = rng.normal_tensor<float>({64, 16}, 3.0);
    auto k = rng.normal_tensor<float>({64, 16}, 3.0);
    auto a = cross_frame_attention(q, k, 2.0).a;
    for (std::size_t r = 0; r < 64; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 64; ++c) {
        CHECK(a[r * 64 + c] >= 0.0f);
        sum += a[r * 64 + c];
      }
      CHECK(std::abs(sum - 1.0) <= 1e-5);
    }
  }
  Tensor<double> q({4, 2}, 1.0);
  CHECK_THROWS_AS(cross_frame_attention(q, q, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(cross_frame_attention(q, q, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(cross_frame_attention(q, Tensor<double>({4, 3}), 2.0), ShapeError);
}

TEST_CASE("cross-frame attention: taped and untaped routes agree") {
  Rng rng(3);
  auto q = rng.normal_tensor<double>({16, 8});
  auto k = rng.normal_tensor<double>({16, 8});
  ag::Tape<double> tape;
  auto taped = cross_frame_attention(tape.constant(q), tape.constant(k), 2.0).value();
  auto plain = cross_frame_attention(q, k, 2.0).a;
  for (std::size_t e = 0; e < plain.size(); ++e) CHECK(std::abs(taped[e] - plain[e]) <= 1e-12);
}

TEST_CASE("temperature sharpens attention") {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto q = rng.normal_tensor<double>({64, 16});
    auto k = rng.normal_tensor<double>({64, 16});
    const double h1 = row_entropy_mean(cross_frame_attention(q, k, 1.0).a);
    const double h2 = row_entropy_mean(cross_frame_attention(q, k, 2.0).a);
    const double h4 = row_entropy_mean(cross_frame_attention(q, k, 4.0).a);
    CHECK(h4 <= h2);
    CHECK(h2 <= h1);
  }
}

TEST_CASE("hard displacement: identity, shift and tie-break") {
  auto id = hard_displacement(from_matrix(kGrid64, identity(64)), kGrid64);
  for (double x : id.delta.values()) CHECK(x == 0.0);
  CHECK(id.mode == FlowMode::hard);

  // Every patch attends to its right neighbour; the last column has none and
  // attends to itself.
  std::vector<double> shift(64 * 64, 0.0);
  for (std::size_t p = 0; p < 64; ++p) {
    const std::size_t target = kGrid64.u(p) + 1 < kGrid64.cols ? p + 1 : p;
    shift[p * 64 + target] = 1.0;
  }
  auto sh = hard_displacement(from_matrix(kGrid64, shift), kGrid64);
  for (std::size_t p = 0; p < 64; ++p) {
    CHECK(sh.delta[2 * p] == (kGrid64.u(p) + 1 < kGrid64.cols ? 1.0 : 0.0));
    CHECK(sh.delta[2 * p + 1] == 0.0);
  }

  std::vector<double> tie(64 * 64, 0.0);
  for (std::size_t p = 0; p < 64; ++p) tie[p * 64 + p] = 1.0;
  tie[0 * 64 + 0] = 0.0;
  tie[0 * 64 + 3] = 0.5;
  tie[0 * 64 + 7] = 0.5;
  auto t = hard_displacement(from_matrix(kGrid64, tie), kGrid64);
  CHECK(t.delta[0] == 3.0);
  CHECK(t.delta[1] == 0.0);
}

TEST_CASE("soft displacement: identity, midpoint, one-hot, bounds") {
  auto id = soft_displacement(from_matrix(kGrid64, identity(64)), kGrid64);
  for (double x : id.delta.values()) CHECK(x == 0.0);

  const PatchGrid row{1, 3};
  std::vector<double> mid = identity(3);
  mid[0] = 0.5;
  mid[2] = 0.5;
  auto m = soft_displacement(from_matrix(row, mid), row);
  CHECK(m.delta[0] == doctest::Approx(1.0));
  CHECK(m.delta[1] == 0.0);

  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> onehot(64 * 64, 0.0);
    for (std::size_t p = 0; p < 64; ++p) onehot[p * 64 + std::size_t(rng.uniform_int(0, 63))] = 1.0;
    auto a = from_matrix(kGrid64, onehot);
    auto soft = soft_displacement(a, kGrid64);
    auto hard = hard_displacement(a, kGrid64);
    CHECK(bit_identical(soft.delta, hard.delta));
  }

  for (int trial = 0; trial < 20; ++trial) {
    auto attn = cross_frame_attention(rng.normal_tensor<double>({64, 16}, 2.0), rng.normal_tensor<double>({64, 16}, 2.0), 2.0);
    auto soft = soft_displacement(attn, kGrid64);
    for (std::size_t p = 0; p < 64; ++p) {
      const double u = double(kGrid64.u(p)) + soft.delta[2 * p], v = double(kGrid64.v(p)) + soft.delta[2 * p + 1];
      CHECK(u >= -1e-12);
      CHECK(u <= double(kGrid64.cols - 1) + 1e-12);
      CHECK(v >= -1e-12);
      CHECK(v <= double(kGrid64.rows - 1) + 1e-12);
    }
  }
}

TEST_CASE("soft displacement approaches hard as temperature grows") {
  // Well-separated maxima: each row's best logit leads by at least 2.
  Rng rng(6);
  Tensor<double> q({16, 16}), k({16, 16});
  for (std::size_t p = 0; p < 16; ++p) {
    q[p * 16 + p] = 4.0;
    k[p * 16 + (p * 5) % 16] = 4.0;
  }
  auto hard = hard_displacement(cross_frame_attention(q, k, 2.0), PatchGrid{4, 4});
  double prev = 1e9;
  for (double tau : {2.0, 4.0, 8.0, 16.0}) {
    auto soft = soft_displacement(cross_frame_attention(q, k, tau), PatchGrid{4, 4});
    double worst = 0.0;
    for (std::size_t e = 0; e < soft.delta.size(); ++e) worst = std::max(worst, std::abs(soft.delta[e] - hard.delta[e]));
    CHECK(worst <= prev);
    prev = worst;
  }
  CHECK(prev <= 0.05);
}

TEST_CASE("motion flow: layout, pairs, batched and per-pair soft routes") {
  Rng rng(7);
  const std::size_t f = 3, dh = 8;
  const PatchGrid g{3, 4};
  AttentionCapture<double> cap;
  cap.block = 1;
  cap.q = rng.normal_tensor<double>({f, g.size(), dh});
  cap.k = rng.normal_tensor<double>({f, g.size(), dh});
  cap.v = rng.normal_tensor<double>({f, g.size(), dh});
  auto hard = hard_amf(cap, g, 2.0);
  CHECK(hard.pair_count() == 9);
  CHECK(hard.delta.dims() == Shape{f, f, g.size(), 2});
  CHECK(hard.block == std::optional<std::size_t>(1));
  for (std::size_t i = 0; i < f; ++i)
    for (std::size_t j = 0; j < f; ++j) {
      auto direct = hard_displacement(cross_frame_attention(cap.frame_q(i), cap.frame_k(j), 2.0), g);
      CHECK(bit_identical(hard.pair(i, j).delta, direct.delta));
    }

  auto soft = soft_amf(cap, g, 2.0);
  ag::Tape<double> tape;
  auto qv = tape.constant(cap.q.reshaped({f * g.size(), dh}));
  auto kv = tape.constant(cap.k.reshaped({f * g.size(), dh}));
  auto batched = soft_amf(qv, kv, f, g, 2.0).value();
  REQUIRE(batched.dims() == soft.delta.dims());
  for (std::size_t e = 0; e < batched.size(); ++e) CHECK(std::abs(batched[e] - soft.delta[e]) <= 1e-12);

  // Loss through both routes.
  auto ref = random_hard_flow(rng, f, g);
  const double direct = amf_loss(ref, soft);
  CHECK(std::abs(amf_loss(ref, soft_amf(qv, kv, f, g, 2.0)).value().item() - direct) <= 1e-9);
  CHECK(std::abs(amf_loss_pairwise(ref, qv, kv, 2.0).value().item() - direct) <= 1e-9);
}

TEST_CASE("amf loss: examples and identities") {
  Rng rng(8);
  auto a = random_hard_flow(rng, 4, kGrid64);
  CHECK(amf_loss(a, a) == 0.0);
  auto b = a;
  b.delta[b.offset(2, 1, 17)] += 1.0;
  CHECK(amf_loss(a, b) == 1.0);

  auto c = random_hard_flow(rng, 4, kGrid64);
  c.mode = FlowMode::soft;
  for (auto& x : c.delta.values()) x += rng.uniform(-0.5, 0.5);
  double brute = 0.0;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t p = 0; p < 64; ++p)
        for (std::size_t ax = 0; ax < 2; ++ax) {
          const double d = a.delta[((i * 4 + j) * 64 + p) * 2 + ax] - c.delta[((i * 4 + j) * 64 + p) * 2 + ax];
          brute += d * d;
        }
  CHECK(std::abs(amf_loss(a, c) - brute) <= 1e-6);
  CHECK(amf_loss(a, c) >= 0.0);
  CHECK(amf_loss(a, c) == amf_loss(c, a));

  auto small = MotionFlow::zeros(FlowMode::hard, 2, kGrid64);
  CHECK_THROWS_AS(amf_loss(a, small), ShapeError);
  ag::Tape<double> tape;
  CHECK_THROWS_AS(amf_loss(a, tape.constant(Tensor<double>({2, 2, 64, 2}))), ShapeError);
}

TEST_CASE("amf loss gradients w.r.t. head-averaged q and k") {
  const std::size_t f = 2, dh = 3;
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    auto ref = random_hard_flow(rng, f, kGrid4);
    auto q = rng.normal_tensor<double>({f * kGrid4.size(), dh});
    auto k = rng.normal_tensor<double>({f * kGrid4.size(), dh});
    ScalarFn wrt_q = [&](ag::Tape<double>& t, ag::Var<double> x) {
      return amf_loss(ref, soft_amf(x, t.constant(k), f, kGrid4, 2.0));
    };
    ScalarFn wrt_k = [&](ag::Tape<double>& t, ag::Var<double> x) {
      return amf_loss(ref, soft_amf(t.constant(q), x, f, kGrid4, 2.0));
    };
    ScalarFn pairwise_q = [&](ag::Tape<double>& t, ag::Var<double> x) {
      return amf_loss_pairwise(ref, x, t.constant(k), 2.0);
    };
    CHECK(finite_diff_check(wrt_q, q, 1e-5) < 1e-4);
    CHECK(finite_diff_check(wrt_k, k, 1e-5) < 1e-4);
    CHECK(finite_diff_check(pairwise_q, q, 1e-5) < 1e-4);

    // Nonzero gradient whenever the flows differ.
    ag::Tape<double> tape;
    auto qv = tape.leaf(q, true);
    auto kv = tape.leaf(k, true);
    auto loss = amf_loss(ref, soft_amf(qv, kv, f, kGrid4, 2.0));
    tape.backward(loss);
    if (loss.value().item() > 0) {
      double gq = 0.0, gk = 0.0;
      for (double x : tape.grad(qv).values()) gq += std::abs(x);
      for (double x : tape.grad(kv).values()) gk += std::abs(x);
      CHECK(gq > 0.0);
      CHECK(gk > 0.0);
    }
  }
}

TEST_CASE("nearest-neighbour displacement") {
  Rng rng(10);
  // Static clip: every frame equal.
  Tensor<float> frame = rng.uniform_tensor<float>({1, 1, 8, 8}, -1, 1);
  Tensor<float> clip({3, 1, 8, 8});
  for (std::size_t f = 0; f < 3; ++f)
    for (std::size_t e = 0; e < 64; ++e) clip[f * 64 + e] = frame[e];
  auto flow = nn_displacement(clip, 2);
  CHECK(flow.source == "nearest_neighbor");
  for (double x : flow.delta.values()) CHECK(x == 0.0);

  // Flat clip: all patches tie, zero displacement wins.
  Tensor<float> flat({2, 1, 8, 8}, 0.25f);
  const auto flat_flow = nn_displacement(flat, 2);
  for (double x : flat_flow.delta.values()) CHECK(x == 0.0);

  // Whole frame rolled right by one patch: interior patches follow.
  Tensor<float> moving({2, 1, 8, 8});
  auto base = rng.uniform_tensor<float>({8, 8}, -1, 1);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      moving[y * 8 + x] = base[y * 8 + x];
      moving[64 + y * 8 + x] = base[y * 8 + (x + 6) % 8];
    }
  auto mf = nn_displacement(moving, 2);
  const PatchGrid g{4, 4};
  for (std::size_t p = 0; p < 16; ++p) {
    const double expect_u = g.u(p) + 1 < g.cols ? 1.0 : -3.0;
    CHECK(mf.du(0, 1, p) == expect_u);
    CHECK(mf.dv(0, 1, p) == 0.0);
  }
}

TEST_CASE("motion flow serialization round-trips") {
  Rng rng(11);
  auto flow = random_hard_flow(rng, 4, kGrid64);
  flow.tau = 2.0;
  flow.block = 2;
  const auto dir = std::filesystem::temp_directory_path() / "ditflow_test_amf";
  std::filesystem::remove_all(dir);
  const auto path = dir / "ref_amf.vtns";
  save_flow(path, flow);
  auto back = load_flow(path);
  CHECK(bit_identical(back.delta, flow.delta));
  CHECK(back.mode == flow.mode);
  CHECK(back.block == flow.block);
  CHECK(back.tau == flow.tau);
  CHECK(back.grid == flow.grid);
  CHECK(sidecar_json(back) == sidecar_json(flow));
  CHECK(vtns::read_file(sidecar_path(path)) == sidecar_json(flow));

  auto nn = flow;
  nn.block.reset();
  nn.source = "nearest_neighbor";
  save_flow(dir / "nn.vtns", nn);
  CHECK_FALSE(load_flow(dir / "nn.vtns").block.has_value());
  CHECK_THROWS_AS(load_flow(dir / "missing.vtns"), FormatError);
  std::filesystem::remove_all(dir);
}
