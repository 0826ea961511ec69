#include "ditflow/model.hpp"

#include <cmath>
#include <cstring>
#include <numbers>
#include <stdexcept>

#include "ditflow/rng.hpp"

namespace ditflow {

using ag::Tape;
using ag::Var;

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (frames < 2) fail("frames must be >= 2");
  if (channels < 1 || height < 1 || width < 1) fail("channels, height and width must be positive");
  if (patch < 1 || height % patch != 0 || width % patch != 0) fail("patch size must divide height and width");
  if (heads < 1 || dim % heads != 0) fail("dim must be divisible by heads");
  if (dim % 4 != 0) fail("dim must be divisible by 4");
  if (blocks < 1) fail("blocks must be >= 1");
  if (steps < 1) fail("steps must be >= 1");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
}

std::uint64_t ModelConfig::geometry_hash() const noexcept {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (std::size_t v : {frames, channels, height, width, patch, dim, heads, blocks, steps, cond_vocab, mlp_ratio}) {
    for (int b = 0; b < 8; ++b) {
      h ^= (static_cast<std::uint64_t>(v) >> (8 * b)) & 0xFF;
      h *= 0x100000001B3ull;
    }
  }
  return h;
}

// ---- schedule ------------------------------------------------------------

DiffusionSchedule::DiffusionSchedule(std::size_t steps, double final_alpha_bar) {
  if (steps < 1) throw ConfigError("schedule needs at least one step");
  const double theta_max = std::acos(std::sqrt(final_alpha_bar));
  alpha_bar_.resize(steps + 1);
  for (std::size_t t = 0; t <= steps; ++t) {
    const double c = std::cos(theta_max * static_cast<double>(t) / static_cast<double>(steps));
    alpha_bar_[t] = c * c;
  }
}

template <typename T>
Tensor<T> DiffusionSchedule::add_noise(const Tensor<T>& z0, std::size_t t, const Tensor<T>& noise) const {
  if (t > steps()) throw std::out_of_range("add_noise: step " + std::to_string(t) + " outside [0, T]");
  if (z0.dims() != noise.dims()) throw ShapeError("add_noise: " + to_string(z0.dims()) + " vs " + to_string(noise.dims()));
  const T a = static_cast<T>(std::sqrt(alpha_bar_[t]));
  const T s = static_cast<T>(std::sqrt(1.0 - alpha_bar_[t]));
  Tensor<T> out(z0.dims());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + s * noise[i];
  return out;
}

template <typename T>
Tensor<T> DiffusionSchedule::ddim_step(const Tensor<T>& zt, const Tensor<T>& eps, std::size_t t) const {
  if (t < 1 || t > steps()) throw std::out_of_range("ddim_step: step " + std::to_string(t) + " outside [1, T]");
  if (zt.dims() != eps.dims()) throw ShapeError("ddim_step: " + to_string(zt.dims()) + " vs " + to_string(eps.dims()));
  const double ab_t = alpha_bar_[t], ab_prev = alpha_bar_[t - 1];
  const T inv_sqrt_t = static_cast<T>(1.0 / std::sqrt(ab_t));
  const T sig_t = static_cast<T>(std::sqrt(1.0 - ab_t));
  const T sqrt_prev = static_cast<T>(std::sqrt(ab_prev));
  const T sig_prev = static_cast<T>(std::sqrt(1.0 - ab_prev));
  Tensor<T> out(zt.dims());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x0 = (zt[i] - sig_t * eps[i]) * inv_sqrt_t;
    out[i] = sqrt_prev * x0 + sig_prev * eps[i];
  }
  return out;
}

// ---- positional embedding --------------------------------------------------

void sinusoid_into(double position, std::size_t width, double* out) {
  for (std::size_t c = 0; c < width; ++c) {
    const std::size_t pair = c / 2;
    const double freq = std::pow(10000.0, -2.0 * static_cast<double>(pair) / static_cast<double>(width));
    out[c] = (c % 2 == 0) ? std::sin(position * freq) : std::cos(position * freq);
  }
}

template <typename T>
Tensor<T> PositionalEmbedding<T>::effective() const {
  Tensor<T> out = base;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += delta[i];
  return out;
}

template <typename T>
PositionalEmbedding<T> build_posemb(const ModelConfig& cfg) {
  if (cfg.dim % 4 != 0) throw ConfigError("positional embedding: dim must be divisible by 4");
  const std::size_t d = cfg.dim, dt = d / 2, ds = d / 4;
  const std::size_t s = cfg.tokens_per_frame(), gw = cfg.grid_w();
  Tensor<T> base({cfg.tokens(), d});
  std::vector<double> row(d);
  for (std::size_t f = 0; f < cfg.frames; ++f)
    for (std::size_t p = 0; p < s; ++p) {
      const std::size_t v = p / gw, u = p % gw;
      sinusoid_into(static_cast<double>(f), dt, row.data());
      sinusoid_into(static_cast<double>(v), ds, row.data() + dt);
      sinusoid_into(static_cast<double>(u), ds, row.data() + dt + ds);
      for (std::size_t c = 0; c < d; ++c) base[(f * s + p) * d + c] = static_cast<T>(row[c]);
    }
  Tensor<T> delta({cfg.tokens(), d});
  return {std::move(base), std::move(delta)};
}

template <typename T>
Var<T> patchify(Var<T> latent, std::size_t patch) {
  const Shape& dims = latent.dims();
  if (dims.size() != 4 || patch == 0 || dims[2] % patch != 0 || dims[3] % patch != 0)
    throw ShapeError("patchify: latent dims " + to_string(dims) + " incompatible with patch " + std::to_string(patch));
  const std::size_t f = dims[0], c = dims[1], gh = dims[2] / patch, gw = dims[3] / patch;
  auto x = ag::reshape(latent, {f, c, gh, patch, gw, patch});
  x = ag::permute(x, {0, 2, 4, 1, 3, 5});
  return ag::reshape(x, {f * gh * gw, c * patch * patch});
}

template <typename T>
Var<T> unpatchify(Var<T> tokens, const Shape& latent_dims, std::size_t patch) {
  if (latent_dims.size() != 4 || patch == 0 || latent_dims[2] % patch != 0 || latent_dims[3] % patch != 0)
    throw ShapeError("unpatchify: latent dims " + to_string(latent_dims) + " incompatible with patch " +
                     std::to_string(patch));
  const std::size_t f = latent_dims[0], c = latent_dims[1], gh = latent_dims[2] / patch, gw = latent_dims[3] / patch;
  if (tokens.dims() != Shape{f * gh * gw, c * patch * patch})
    throw ShapeError("unpatchify: token dims " + to_string(tokens.dims()) + " do not match latent " +
                     to_string(latent_dims));
  auto x = ag::reshape(tokens, {f, gh, gw, c, patch, patch});
  x = ag::permute(x, {0, 3, 1, 4, 2, 5});
  return ag::reshape(x, latent_dims);
}

template <typename T>
Tensor<T> AttentionCapture<T>::frame_q(std::size_t i) const {
  const std::size_t s = q.dim(1), dh = q.dim(2);
  return Tensor<T>({s, dh}, std::vector<T>(q.data() + i * s * dh, q.data() + (i + 1) * s * dh));
}

template <typename T>
Tensor<T> AttentionCapture<T>::frame_k(std::size_t j) const {
  const std::size_t s = k.dim(1), dh = k.dim(2);
  return Tensor<T>({s, dh}, std::vector<T>(k.data() + j * s * dh, k.data() + (j + 1) * s * dh));
}

// ---- model ------------------------------------------------------------------

namespace {

const char* const kGlobalNames[] = {"patch.w", "patch.b", "time_table", "cond_table",
                                    "final_ln.gamma", "final_ln.beta", "out.w", "out.b"};
const char* const kBlockNames[] = {"ln1.gamma", "ln1.beta", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "attn.bo",
                                   "ln2.gamma", "ln2.beta", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"};

enum Global : std::size_t { kPatchW, kPatchB, kTimeTable, kCondTable, kFinalGamma, kFinalBeta, kOutW, kOutB };
enum Block : std::size_t { kLn1G, kLn1B, kWq, kWk, kWv, kWo, kBo, kLn2G, kLn2B, kW1, kB1, kW2, kB2 };

std::vector<Shape> parameter_shapes(const ModelConfig& c) {
  const std::size_t d = c.dim, hid = c.dim * c.mlp_ratio;
  std::vector<Shape> shapes = {{c.patch_dim(), d}, {d},       {c.steps + 1, d}, {c.cond_vocab + 1, d},
                               {d},                {d},       {d, c.patch_dim()}, {c.patch_dim()}};
  for (std::size_t b = 0; b < c.blocks; ++b) {
    const std::vector<Shape> block = {{d}, {d}, {d, d}, {d, d}, {d, d}, {d, d}, {d}, {d}, {d}, {d, hid}, {hid}, {hid, d}, {d}};
    shapes.insert(shapes.end(), block.begin(), block.end());
  }
  return shapes;
}

}  // namespace

template <typename T>
DiTModel<T>::DiTModel(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  schedule_ = DiffusionSchedule(cfg_.steps);
  posemb_ = build_posemb<T>(cfg_);
  Rng rng(derive_seed(seed, "model-init"));
  const auto shapes = parameter_shapes(cfg_);
  params_.reserve(shapes.size());
  const double d = static_cast<double>(cfg_.dim);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const Shape& s = shapes[i];
    Tensor<T> p(s);
    auto fill_normal = [&](double stddev) {
      for (auto& v : p.values()) v = static_cast<T>(stddev * rng.normal());
    };
    if (i < kGlobalParams) {
      switch (i) {
        case kPatchW:
          fill_normal(1.0 / std::sqrt(static_cast<double>(cfg_.patch_dim())));
          break;
        case kTimeTable: {
          std::vector<double> row(cfg_.dim);
          for (std::size_t t = 0; t <= cfg_.steps; ++t) {
            sinusoid_into(static_cast<double>(t), cfg_.dim, row.data());
            for (std::size_t c = 0; c < cfg_.dim; ++c) p[t * cfg_.dim + c] = static_cast<T>(row[c]);
          }
          break;
        }
        case kCondTable:
          fill_normal(0.1);
          for (std::size_t c = 0; c < cfg_.dim; ++c) p[c] = T(0);
          break;
        case kFinalGamma:
          p = Tensor<T>(s, T(1));
          break;
        case kOutW:
          fill_normal(0.02);
          break;
        default:
          break;
      }
    } else {
      switch ((i - kGlobalParams) % kBlockParams) {
        case kLn1G:
        case kLn2G:
          p = Tensor<T>(s, T(1));
          break;
        case kWq:
        case kWk:
        case kWv:
        case kWo:
        case kW1:
          fill_normal(1.0 / std::sqrt(d));
          break;
        case kW2:
          fill_normal(0.5 / std::sqrt(d * static_cast<double>(cfg_.mlp_ratio)));
          break;
        default:
          break;
      }
    }
    params_.push_back(std::move(p));
  }
}

template <typename T>
DiTModel<T>::DiTModel(ModelConfig cfg, std::vector<Tensor<T>> params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  schedule_ = DiffusionSchedule(cfg_.steps);
  posemb_ = build_posemb<T>(cfg_);
  const auto shapes = parameter_shapes(cfg_);
  if (params_.size() != shapes.size())
    throw ConfigError("model expects " + std::to_string(shapes.size()) + " parameters, got " +
                      std::to_string(params_.size()));
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (params_[i].dims() != shapes[i])
      throw ShapeError("parameter " + std::to_string(i) + " has dims " + to_string(params_[i].dims()) + ", expected " +
                       to_string(shapes[i]));
    require_finite(params_[i], "model parameter");
  }
}

template <typename T>
std::vector<std::string> DiTModel<T>::parameter_names() const {
  std::vector<std::string> names(std::begin(kGlobalNames), std::end(kGlobalNames));
  for (std::size_t b = 0; b < cfg_.blocks; ++b)
    for (const char* n : kBlockNames) names.push_back("block" + std::to_string(b) + "." + n);
  return names;
}

template <typename T>
Tensor<T>& DiTModel<T>::parameter(const std::string& name) {
  const auto names = parameter_names();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return params_[i];
  throw std::out_of_range("no parameter named " + name);
}

template <typename T>
const Tensor<T>& DiTModel<T>::parameter(const std::string& name) const {
  return const_cast<DiTModel*>(this)->parameter(name);
}

template <typename T>
std::vector<Var<T>> DiTModel<T>::bind(Tape<T>& tape, bool requires_grad) const {
  std::vector<Var<T>> vars;
  vars.reserve(params_.size());
  for (const auto& p : params_) vars.push_back(tape.leaf(p, requires_grad));
  return vars;
}

template <typename T>
Var<T> DiTModel<T>::patchify(Var<T> latent) const {
  if (latent.dims() != cfg_.latent_shape())
    throw ShapeError("patchify: latent dims " + to_string(latent.dims()) + " do not match config " +
                     to_string(cfg_.latent_shape()));
  return ditflow::patchify(latent, cfg_.patch);
}

template <typename T>
Var<T> DiTModel<T>::unpatchify(Var<T> tokens) const {
  return ditflow::unpatchify(tokens, cfg_.latent_shape(), cfg_.patch);
}

template <typename T>
ForwardResult<T> DiTModel<T>::forward(Tape<T>& tape, const std::vector<Var<T>>& w, const ForwardArgs<T>& args) const {
  if (w.size() != params_.size()) throw std::invalid_argument("forward: parameter binding has wrong size");
  if (args.step > cfg_.steps) throw std::out_of_range("forward: step " + std::to_string(args.step) + " outside [0, T]");
  if (args.cond > cfg_.cond_vocab)
    throw std::out_of_range("forward: condition " + std::to_string(args.cond) + " outside [0, vocab]");
  if (args.capture_block && *args.capture_block >= cfg_.blocks)
    throw ConfigError("capture block " + std::to_string(*args.capture_block) + " >= number of blocks " +
                      std::to_string(cfg_.blocks));
  if (args.inject) {
    if (args.inject->block >= cfg_.blocks) throw ConfigError("injection block out of range");
    const Shape want{cfg_.tokens(), cfg_.heads, cfg_.head_dim()};
    if (args.inject->keys.dims() != want || args.inject->values.dims() != want)
      throw ShapeError("KV cache dims " + to_string(args.inject->keys.dims()) + " do not match " + to_string(want));
  }

  const std::size_t n = cfg_.tokens(), d = cfg_.dim, m = cfg_.heads, dh = cfg_.head_dim();
  auto h = ag::add(ag::matmul(patchify(args.latent), w[kPatchW]), w[kPatchB]);
  Var<T> pos = tape.constant(posemb_.base);
  if (args.posemb_delta) {
    if (args.posemb_delta->dims() != posemb_.base.dims())
      throw ShapeError("posemb delta dims " + to_string(args.posemb_delta->dims()) + " vs " + to_string(posemb_.base.dims()));
    pos = ag::add(pos, *args.posemb_delta);
  }
  h = ag::add(h, pos);
  h = ag::add(h, ag::reshape(ag::gather_rows(w[kTimeTable], {args.step}), {d}));
  h = ag::add(h, ag::reshape(ag::gather_rows(w[kCondTable], {args.cond}), {d}));

  ForwardResult<T> result;
  const T attn_scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (std::size_t b = 0; b < cfg_.blocks; ++b) {
    auto bw = [&](std::size_t j) { return w[block_param(b, j)]; };
    auto a = ag::layer_norm(h, bw(kLn1G), bw(kLn1B));
    auto q = ag::matmul(a, bw(kWq));
    auto k = ag::matmul(a, bw(kWk));
    auto v = ag::matmul(a, bw(kWv));
    if (args.inject && args.inject->block == b) {
      k = tape.constant(args.inject->keys.reshaped({n, d}));
      v = tape.constant(args.inject->values.reshaped({n, d}));
    }
    auto qh = ag::reshape(q, {n, m, dh});
    auto kh = ag::reshape(k, {n, m, dh});
    auto vh = ag::reshape(v, {n, m, dh});
    if (args.capture_block && *args.capture_block == b) {
      CaptureVars<T> cap;
      cap.block = b;
      cap.q_heads = qh;
      cap.k_heads = kh;
      cap.v_heads = vh;
      cap.q_mean = ag::mean_axis(qh, 1);
      cap.k_mean = ag::mean_axis(kh, 1);
      cap.v_mean = ag::mean_axis(vh, 1);
      result.capture = cap;
    }
    auto qp = ag::permute(qh, {1, 0, 2});
    auto kp = ag::permute(kh, {1, 0, 2});
    auto vp = ag::permute(vh, {1, 0, 2});
    auto attn = ag::softmax(ag::matmul(qp, ag::transpose(kp)), attn_scale);
    auto o = ag::reshape(ag::permute(ag::matmul(attn, vp), {1, 0, 2}), {n, d});
    h = ag::add(h, ag::add(ag::matmul(o, bw(kWo)), bw(kBo)));
    auto mlp = ag::layer_norm(h, bw(kLn2G), bw(kLn2B));
    mlp = ag::gelu(ag::add(ag::matmul(mlp, bw(kW1)), bw(kB1)));
    mlp = ag::add(ag::matmul(mlp, bw(kW2)), bw(kB2));
    h = ag::add(h, mlp);
  }
  auto out = ag::layer_norm(h, w[kFinalGamma], w[kFinalBeta]);
  out = ag::add(ag::matmul(out, w[kOutW]), w[kOutB]);
  result.eps = unpatchify(out);
  return result;
}

template <typename T>
Tensor<T> DiTModel<T>::predict_noise(const Tensor<T>& z, std::size_t step, std::size_t cond, const Tensor<T>* delta,
                                     const KVCache<T>* inject) const {
  Tape<T> tape;
  ForwardArgs<T> args;
  args.latent = tape.constant(z);
  args.step = step;
  args.cond = cond;
  if (delta) args.posemb_delta = tape.constant(*delta);
  args.inject = inject;
  return forward(tape, bind(tape, false), args).eps.value();
}

template <typename T>
AttentionCapture<T> DiTModel<T>::capture(const Tensor<T>& z, std::size_t step, std::size_t cond, std::size_t block,
                                         const Tensor<T>* delta, const KVCache<T>* inject) const {
  Tape<T> tape;
  ForwardArgs<T> args;
  args.latent = tape.constant(z);
  args.step = step;
  args.cond = cond;
  args.capture_block = block;
  if (delta) args.posemb_delta = tape.constant(*delta);
  args.inject = inject;
  auto res = forward(tape, bind(tape, false), args);
  const Shape fsd{cfg_.frames, cfg_.tokens_per_frame(), cfg_.head_dim()};
  AttentionCapture<T> cap;
  cap.block = block;
  cap.q = res.capture->q_mean.value().reshaped(fsd);
  cap.k = res.capture->k_mean.value().reshaped(fsd);
  cap.v = res.capture->v_mean.value().reshaped(fsd);
  return cap;
}

template <typename T>
std::uint64_t DiTModel<T>::weights_checksum() const noexcept {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (const auto& p : params_) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.data());
    for (std::size_t i = 0; i < p.size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 0x100000001B3ull;
    }
  }
  return h;
}

template class DiTModel<float>;
template class DiTModel<double>;
template struct PositionalEmbedding<float>;
template struct PositionalEmbedding<double>;
template struct AttentionCapture<float>;
template struct AttentionCapture<double>;
template Var<float> patchify(Var<float>, std::size_t);
template Var<double> patchify(Var<double>, std::size_t);
template Var<float> unpatchify(Var<float>, const Shape&, std::size_t);
template Var<double> unpatchify(Var<double>, const Shape&, std::size_t);
template PositionalEmbedding<float> build_posemb(const ModelConfig&);
template PositionalEmbedding<double> build_posemb(const ModelConfig&);
template Tensor<float> DiffusionSchedule::add_noise(const Tensor<float>&, std::size_t, const Tensor<float>&) const;
template Tensor<double> DiffusionSchedule::add_noise(const Tensor<double>&, std::size_t, const Tensor<double>&) const;
template Tensor<float> DiffusionSchedule::ddim_step(const Tensor<float>&, const Tensor<float>&, std::size_t) const;
template Tensor<double> DiffusionSchedule::ddim_step(const Tensor<double>&, const Tensor<double>&, std::size_t) const;

}  // namespace ditflow
