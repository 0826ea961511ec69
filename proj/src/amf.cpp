#include "ditflow/amf.hpp"

#include <cmath>
#include <limits>

#include <json.hpp>

#include "ditflow/errors.hpp"
#include "ditflow/kernels.hpp"
#include "ditflow/vtns.hpp"

namespace ditflow::amf {

namespace fs = std::filesystem;
using ag::Tape;
using ag::Var;

std::string_view mode_name(FlowMode mode) noexcept { return mode == FlowMode::hard ? "hard" : "soft"; }

FlowMode parse_mode(std::string_view name) {
  if (name == "hard") return FlowMode::hard;
  if (name == "soft") return FlowMode::soft;
  throw FormatError("unknown flow mode '" + std::string(name) + "'");
}

template <typename T>
Tensor<T> coordinate_table(const PatchGrid& grid) {
  Tensor<T> t({grid.size(), 2});
  for (std::size_t p = 0; p < grid.size(); ++p) {
    t[2 * p] = static_cast<T>(grid.u(p));
    t[2 * p + 1] = static_cast<T>(grid.v(p));
  }
  return t;
}

namespace {

void require_tau(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw std::invalid_argument("temperature must be positive, got " + std::to_string(tau));
}

template <typename T>
void require_square(const Tensor<T>& a, const PatchGrid& grid, const char* what) {
  if (a.rank() != 2 || a.dim(0) != grid.size() || a.dim(1) != grid.size())
    throw ShapeError(std::string(what) + ": attention dims " + to_string(a.dims()) + " do not match grid of " +
                     std::to_string(grid.size()) + " patches");
}

}  // namespace

template <typename T>
CrossFrameAttention<T> cross_frame_attention(const Tensor<T>& q_i, const Tensor<T>& k_j, double tau, std::size_t i,
                                             std::size_t j) {
  require_tau(tau);
  if (q_i.rank() != 2 || k_j.rank() != 2 || q_i.dim(1) != k_j.dim(1))
    throw ShapeError("cross_frame_attention: " + to_string(q_i.dims()) + " vs " + to_string(k_j.dims()));
  require_finite(q_i, "cross_frame_attention queries");
  require_finite(k_j, "cross_frame_attention keys");
  const std::size_t s = q_i.dim(0), t = k_j.dim(0), dk = q_i.dim(1);
  const auto& kt = kernels::active<T>();
  Tensor<T> logits({s, t});
  kt.gemm_nt(s, t, dk, q_i.data(), k_j.data(), logits.data());
  const T scale = static_cast<T>(tau / std::sqrt(static_cast<double>(dk)));
  CrossFrameAttention<T> out{i, j, tau, Tensor<T>({s, t})};
  for (std::size_t r = 0; r < s; ++r) kt.softmax_row(logits.data() + r * t, out.a.data() + r * t, t, scale);
  return out;
}

template <typename T>
Var<T> cross_frame_attention(Var<T> q_i, Var<T> k_j, T tau) {
  require_tau(static_cast<double>(tau));
  if (q_i.dims().size() != 2 || k_j.dims().size() != 2 || q_i.dims()[1] != k_j.dims()[1])
    throw ShapeError("cross_frame_attention: " + to_string(q_i.dims()) + " vs " + to_string(k_j.dims()));
  const T scale = tau / std::sqrt(static_cast<T>(q_i.dims()[1]));
  return ag::softmax(ag::matmul(q_i, ag::transpose(k_j)), scale);
}

template <typename T>
DisplacementMap hard_displacement(const CrossFrameAttention<T>& attn, const PatchGrid& grid) {
  require_square(attn.a, grid, "hard_displacement");
  const std::size_t s = grid.size();
  DisplacementMap out{attn.i, attn.j, FlowMode::hard, Tensor<double>({s, 2})};
  for (std::size_t p = 0; p < s; ++p) {
    const T* row = attn.a.data() + p * s;
    std::size_t best = 0;
    for (std::size_t c = 1; c < s; ++c)
      if (row[c] > row[best]) best = c;
    out.delta[2 * p] = double(grid.u(best)) - double(grid.u(p));
    out.delta[2 * p + 1] = double(grid.v(best)) - double(grid.v(p));
  }
  return out;
}

template <typename T>
DisplacementMap soft_displacement(const CrossFrameAttention<T>& attn, const PatchGrid& grid) {
  require_square(attn.a, grid, "soft_displacement");
  const std::size_t s = grid.size();
  DisplacementMap out{attn.i, attn.j, FlowMode::soft, Tensor<double>({s, 2})};
  for (std::size_t p = 0; p < s; ++p) {
    const T* row = attn.a.data() + p * s;
    double eu = 0.0, ev = 0.0;
    for (std::size_t c = 0; c < s; ++c) {
      eu += double(row[c]) * double(grid.u(c));
      ev += double(row[c]) * double(grid.v(c));
    }
    out.delta[2 * p] = eu - double(grid.u(p));
    out.delta[2 * p + 1] = ev - double(grid.v(p));
  }
  return out;
}

template <typename T>
Var<T> soft_displacement(Var<T> attention, const PatchGrid& grid) {
  const std::size_t s = grid.size();
  if (attention.dims() != Shape{s, s})
    throw ShapeError("soft_displacement: attention dims " + to_string(attention.dims()) + " do not match grid of " +
                     std::to_string(s) + " patches");
  Tape<T>& tape = *attention.tape();
  auto coords = coordinate_table<T>(grid);
  auto expected = ag::matmul(attention, tape.constant(coords));
  return ag::sub(expected, tape.constant(coords));
}

// ---- MotionFlow --------------------------------------------------------------

MotionFlow MotionFlow::zeros(FlowMode mode, std::size_t frames, const PatchGrid& grid) {
  if (frames == 0 || grid.size() == 0) throw ShapeError("motion flow needs at least one frame and one patch");
  MotionFlow f;
  f.mode = mode;
  f.frames = frames;
  f.grid = grid;
  f.delta = Tensor<double>({frames, frames, grid.size(), 2});
  return f;
}

DisplacementMap MotionFlow::pair(std::size_t i, std::size_t j) const {
  if (i >= frames || j >= frames) throw std::out_of_range("motion flow pair out of range");
  const std::size_t n = grid.size() * 2;
  const double* src = delta.data() + offset(i, j, 0);
  return {i, j, mode, Tensor<double>({grid.size(), 2}, std::vector<double>(src, src + n))};
}

void MotionFlow::set_pair(const DisplacementMap& map) {
  if (map.i >= frames || map.j >= frames) throw std::out_of_range("motion flow pair out of range");
  if (map.delta.dims() != Shape{grid.size(), 2})
    throw ShapeError("displacement map dims " + to_string(map.delta.dims()) + " do not match grid");
  std::copy(map.delta.data(), map.delta.data() + map.delta.size(), delta.data() + offset(map.i, map.j, 0));
}

namespace {

template <typename T, typename Build>
MotionFlow flow_from_capture(const AttentionCapture<T>& cap, const PatchGrid& grid, double tau, FlowMode mode,
                             Build build) {
  if (cap.q.rank() != 3 || cap.q.dim(1) != grid.size() || cap.k.dims() != cap.q.dims())
    throw ShapeError("capture dims " + to_string(cap.q.dims()) + " do not match grid of " +
                     std::to_string(grid.size()) + " patches");
  const std::size_t f = cap.q.dim(0);
  MotionFlow flow = MotionFlow::zeros(mode, f, grid);
  flow.tau = tau;
  flow.block = cap.block;
  for (std::size_t i = 0; i < f; ++i) {
    const Tensor<T> qi = cap.frame_q(i);
    for (std::size_t j = 0; j < f; ++j) flow.set_pair(build(cross_frame_attention(qi, cap.frame_k(j), tau, i, j), grid));
  }
  return flow;
}

}  // namespace

template <typename T>
MotionFlow hard_amf(const AttentionCapture<T>& cap, const PatchGrid& grid, double tau) {
  return flow_from_capture(cap, grid, tau, FlowMode::hard,
                           [](const CrossFrameAttention<T>& a, const PatchGrid& g) { return hard_displacement(a, g); });
}

template <typename T>
MotionFlow soft_amf(const AttentionCapture<T>& cap, const PatchGrid& grid, double tau) {
  return flow_from_capture(cap, grid, tau, FlowMode::soft,
                           [](const CrossFrameAttention<T>& a, const PatchGrid& g) { return soft_displacement(a, g); });
}

template <typename T>
Var<T> soft_amf(Var<T> q, Var<T> k, std::size_t frames, const PatchGrid& grid, T tau) {
  require_tau(static_cast<double>(tau));
  const std::size_t s = grid.size(), n = frames * s;
  if (q.dims().size() != 2 || q.dims()[0] != n || k.dims() != q.dims())
    throw ShapeError("soft_amf: q " + to_string(q.dims()) + ", k " + to_string(k.dims()) + " for " +
                     std::to_string(frames) + " frames of " + std::to_string(s) + " patches");
  Tape<T>& tape = *q.tape();
  const T scale = tau / std::sqrt(static_cast<T>(q.dims()[1]));
  // [F*S, F*S] logits viewed as [F*S, F, S]: the last axis is one target frame.
  auto logits = ag::reshape(ag::matmul(q, ag::transpose(k)), {n, frames, s});
  auto attn = ag::softmax(logits, scale);
  auto expected = ag::matmul(attn, tape.constant(coordinate_table<T>(grid)));  // [F*S, F, 2]
  Tensor<T> source({n, frames, 2});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < frames; ++j) {
      source[(r * frames + j) * 2] = static_cast<T>(grid.u(r % s));
      source[(r * frames + j) * 2 + 1] = static_cast<T>(grid.v(r % s));
    }
  auto disp = ag::sub(expected, tape.constant(std::move(source)));
  return ag::permute(ag::reshape(disp, {frames, s, frames, 2}), {0, 2, 1, 3});
}

double amf_loss(const MotionFlow& ref, const MotionFlow& cur) {
  if (!ref.same_geometry(cur) || ref.delta.dims() != cur.delta.dims())
    throw ShapeError("amf_loss: flow geometries differ, " + to_string(ref.delta.dims()) + " vs " +
                     to_string(cur.delta.dims()));
  double acc = 0.0;
  for (std::size_t e = 0; e < ref.delta.size(); ++e) {
    const double d = ref.delta[e] - cur.delta[e];
    acc += d * d;
  }
  return acc;
}

template <typename T>
Var<T> amf_loss(const MotionFlow& ref, Var<T> cur) {
  if (cur.dims() != ref.delta.dims())
    throw ShapeError("amf_loss: flow dims " + to_string(cur.dims()) + " vs reference " + to_string(ref.delta.dims()));
  return ag::sum_squares(ag::sub(cur, cur.tape()->constant(ref.delta.template cast<T>())));
}

template <typename T>
Var<T> amf_loss_pairwise(const MotionFlow& ref, Var<T> q, Var<T> k, T tau) {
  const std::size_t f = ref.frames, s = ref.grid.size();
  if (q.dims().size() != 2 || q.dims()[0] != f * s || k.dims() != q.dims())
    throw ShapeError("amf_loss_pairwise: q " + to_string(q.dims()) + " does not match reference geometry");
  Tape<T>& tape = *q.tape();
  auto rows_of = [&](Var<T> x, std::size_t frame) {
    std::vector<std::size_t> rows(s);
    for (std::size_t p = 0; p < s; ++p) rows[p] = frame * s + p;
    return ag::gather_rows(x, rows);
  };
  std::optional<Var<T>> total;
  for (std::size_t i = 0; i < f; ++i) {
    auto qi = rows_of(q, i);
    for (std::size_t j = 0; j < f; ++j) {
      auto disp = soft_displacement(cross_frame_attention(qi, rows_of(k, j), tau), ref.grid);
      auto target = tape.constant(ref.pair(i, j).delta.template cast<T>());
      auto term = ag::sum_squares(ag::sub(disp, target));
      total = total ? ag::add(*total, term) : term;
    }
  }
  return *total;
}

template <typename T>
MotionFlow extract_reference_amf(const DiTModel<T>& model, const Tensor<T>& z_ref, std::size_t block, double tau) {
  require_tau(tau);
  auto cap = model.capture(z_ref, 0, 0, block);
  return hard_amf(cap, grid_of(model.config()), tau);
}

template <typename T>
MotionFlow nn_displacement(const Tensor<T>& z, std::size_t patch) {
  Tape<T> tape;
  const auto tokens = patchify(tape.constant(z), patch).value();
  const std::size_t f = z.dim(0), pd = tokens.dim(1);
  const PatchGrid grid{z.dim(2) / patch, z.dim(3) / patch};
  const std::size_t s = grid.size();
  MotionFlow flow = MotionFlow::zeros(FlowMode::hard, f, grid);
  flow.source = "nearest_neighbor";
  auto dist = [&](std::size_t a, std::size_t b) {
    double acc = 0.0;
    for (std::size_t c = 0; c < pd; ++c) {
      const double d = double(tokens[a * pd + c]) - double(tokens[b * pd + c]);
      acc += d * d;
    }
    return acc;
  };
  for (std::size_t i = 0; i < f; ++i)
    for (std::size_t j = 0; j < f; ++j)
      for (std::size_t p = 0; p < s; ++p) {
        std::size_t best = p;
        double best_d = dist(i * s + p, j * s + p);
        for (std::size_t c = 0; c < s; ++c) {
          const double d = dist(i * s + p, j * s + c);
          if (d < best_d) best = c, best_d = d;
        }
        flow.delta[flow.offset(i, j, p)] = double(grid.u(best)) - double(grid.u(p));
        flow.delta[flow.offset(i, j, p) + 1] = double(grid.v(best)) - double(grid.v(p));
      }
  return flow;
}

// ---- serialization -------------------------------------------------------------

fs::path sidecar_path(const fs::path& path) {
  fs::path side = path;
  side.replace_extension(".json");
  return side;
}

std::string sidecar_json(const MotionFlow& flow) {
  nlohmann::json j{{"format", "ditflow-motionflow/1"},
                   {"mode", mode_name(flow.mode)},
                   {"source", flow.source},
                   {"tau", flow.tau},
                   {"block", flow.block ? nlohmann::json(*flow.block) : nlohmann::json(nullptr)},
                   {"coords", "u=col,v=row"},
                   {"frames", flow.frames},
                   {"grid_rows", flow.grid.rows},
                   {"grid_cols", flow.grid.cols},
                   {"tokens_per_frame", flow.grid.size()}};
  return j.dump(2) + "\n";
}

void save_flow(const fs::path& path, const MotionFlow& flow) {
  vtns::save(path, flow.delta);
  vtns::write_file(sidecar_path(path), sidecar_json(flow));
}

MotionFlow load_flow(const fs::path& path) {
  const fs::path side = sidecar_path(path);
  if (!fs::exists(side)) throw FormatError("motion flow sidecar not found: " + side.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(vtns::read_file(side));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("motion flow sidecar " + side.string() + ": " + e.what());
  }
  if (j.value("format", "") != "ditflow-motionflow/1" || j.value("coords", "") != "u=col,v=row")
    throw FormatError("motion flow sidecar " + side.string() + ": unsupported format or coordinate convention");
  MotionFlow flow;
  try {
    flow.mode = parse_mode(j.at("mode").get<std::string>());
    flow.source = j.at("source").get<std::string>();
    flow.tau = j.at("tau").get<double>();
    if (!j.at("block").is_null()) flow.block = j.at("block").get<std::size_t>();
    flow.frames = j.at("frames").get<std::size_t>();
    flow.grid = {j.at("grid_rows").get<std::size_t>(), j.at("grid_cols").get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("motion flow sidecar " + side.string() + ": " + e.what());
  }
  flow.delta = vtns::load<double>(path);
  if (flow.delta.dims() != Shape{flow.frames, flow.frames, flow.grid.size(), 2})
    throw FormatError("motion flow " + path.string() + ": tensor dims " + to_string(flow.delta.dims()) +
                      " disagree with the sidecar");
  return flow;
}

#define DITFLOW_AMF_INSTANTIATE(T)                                                                                 \
  template Tensor<T> coordinate_table<T>(const PatchGrid&);                                                        \
  template CrossFrameAttention<T> cross_frame_attention(const Tensor<T>&, const Tensor<T>&, double, std::size_t,  \
                                                        std::size_t);                                             \
  template Var<T> cross_frame_attention(Var<T>, Var<T>, T);                                                        \
  template DisplacementMap hard_displacement(const CrossFrameAttention<T>&, const PatchGrid&);                     \
  template DisplacementMap soft_displacement(const CrossFrameAttention<T>&, const PatchGrid&);                     \
  template Var<T> soft_displacement(Var<T>, const PatchGrid&);                                                     \
  template MotionFlow hard_amf(const AttentionCapture<T>&, const PatchGrid&, double);                              \
  template MotionFlow soft_amf(const AttentionCapture<T>&, const PatchGrid&, double);                              \
  template Var<T> soft_amf(Var<T>, Var<T>, std::size_t, const PatchGrid&, T);                                      \
  template Var<T> amf_loss(const MotionFlow&, Var<T>);                                                             \
  template Var<T> amf_loss_pairwise(const MotionFlow&, Var<T>, Var<T>, T);                                         \
  template MotionFlow extract_reference_amf(const DiTModel<T>&, const Tensor<T>&, std::size_t, double);            \
  template MotionFlow nn_displacement(const Tensor<T>&, std::size_t);

DITFLOW_AMF_INSTANTIATE(float)
DITFLOW_AMF_INSTANTIATE(double)

}  // namespace ditflow::amf
