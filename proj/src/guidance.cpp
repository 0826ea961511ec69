#include "ditflow/guidance.hpp"

#include <cmath>
#include <cstdio>

#include "ditflow/errors.hpp"
#include "ditflow/rng.hpp"
#include "ditflow/vtns.hpp"

namespace ditflow::guidance {

namespace fs = std::filesystem;
using ag::Tape;
using ag::Var;
using nlohmann::json;

std::string_view target_name(TargetMode mode) noexcept { return mode == TargetMode::latent ? "latent" : "posemb"; }

TargetMode parse_target(std::string_view name) {
  if (name == "latent") return TargetMode::latent;
  if (name == "posemb") return TargetMode::posemb;
  throw ConfigError("unknown target mode '" + std::string(name) + "' (expected latent or posemb)");
}

GuidanceConfig GuidanceConfig::defaults_for(const ModelConfig& model) {
  GuidanceConfig cfg;
  cfg.block = model.blocks / 2;
  return cfg;
}

void GuidanceConfig::validate(const ModelConfig& model) const {
  auto fail = [](const std::string& msg) { throw ConfigError("guidance config: " + msg); };
  if (!(t_opt_fraction >= 0.0 && t_opt_fraction <= 1.0)) fail("t_opt fraction must lie in [0, 1]");
  if (!(lr_end > 0.0)) fail("lr_end must be positive");
  if (!(lr_start >= lr_end)) fail("lr_start must be >= lr_end");
  if (!(tau > 0.0) || !std::isfinite(tau)) fail("tau must be positive");
  if (block >= model.blocks) fail("block " + std::to_string(block) + " >= number of blocks " + std::to_string(model.blocks));
  if (inject_kv && injection_block >= model.blocks)
    fail("injection block " + std::to_string(injection_block) + " >= number of blocks " + std::to_string(model.blocks));
}

std::size_t GuidanceConfig::guided_count(std::size_t steps) const {
  // The small slack keeps 0.2 * 50 at 10 despite rounding in the product.
  const double raw = std::ceil(t_opt_fraction * double(steps) - 1e-9);
  return std::min<std::size_t>(steps, raw <= 0.0 ? 0 : static_cast<std::size_t>(raw));
}

json config_to_json(const GuidanceConfig& c) {
  return {{"block", c.block},
          {"tau", c.tau},
          {"k_opt", c.k_opt},
          {"t_opt_fraction", c.t_opt_fraction},
          {"lr_start", c.lr_start},
          {"lr_end", c.lr_end},
          {"target", target_name(c.target)},
          {"inject_kv", c.inject_kv},
          {"injection_block", c.injection_block},
          {"seed", c.seed}};
}

GuidanceConfig config_from_json(const json& j) {
  GuidanceConfig c;
  try {
    c.block = j.at("block").get<std::size_t>();
    c.tau = j.at("tau").get<double>();
    c.k_opt = j.at("k_opt").get<std::size_t>();
    c.t_opt_fraction = j.at("t_opt_fraction").get<double>();
    c.lr_start = j.at("lr_start").get<double>();
    c.lr_end = j.at("lr_end").get<double>();
    c.target = parse_target(j.at("target").get<std::string>());
    c.inject_kv = j.at("inject_kv").get<bool>();
    c.injection_block = j.at("injection_block").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("guidance config: ") + e.what());
  }
  return c;
}

double lr_at(std::size_t t, const GuidanceConfig& cfg, std::size_t steps) {
  const std::size_t n = cfg.guided_count(steps);
  if (n == 0 || t > steps || !cfg.is_guided(t, steps))
    throw std::out_of_range("lr_at: step " + std::to_string(t) + " outside the guided window");
  if (n == 1) return cfg.lr_start;
  const double last = double(steps - n + 1);
  const double frac = (double(steps) - double(t)) / (double(steps) - last);
  return cfg.lr_start + frac * (cfg.lr_end - cfg.lr_start);
}

template <typename T>
KVCache<T> capture_reference_kv(const DiTModel<T>& model, const Tensor<T>& z_ref, std::size_t block) {
  const auto& mc = model.config();
  if (block >= mc.blocks)
    throw ConfigError("injection block " + std::to_string(block) + " >= number of blocks " + std::to_string(mc.blocks));
  Tape<T> tape;
  ForwardArgs<T> args;
  args.latent = tape.constant(z_ref);
  args.step = 0;
  args.cond = 0;
  args.capture_block = block;
  auto res = model.forward(tape, model.bind(tape, false), args);
  return {block, res.capture->k_heads.value(), res.capture->v_heads.value()};
}

template <typename T>
Var<T> guidance_loss(Tape<T>& tape, const DiTModel<T>& model, const std::vector<Var<T>>& params, Var<T> latent,
                     std::optional<Var<T>> delta, std::size_t t, std::size_t cond, const amf::MotionFlow& ref,
                     const GuidanceConfig& cfg, const KVCache<T>* kv) {
  const auto& mc = model.config();
  const auto grid = amf::grid_of(mc);
  if (ref.frames != mc.frames || !(ref.grid == grid))
    throw ShapeError("reference flow geometry (" + std::to_string(ref.frames) + " frames, " +
                     std::to_string(ref.grid.rows) + "x" + std::to_string(ref.grid.cols) + ") does not match the model");
  ForwardArgs<T> args;
  args.latent = latent;
  args.step = t;
  args.cond = cond;
  args.posemb_delta = delta;
  args.capture_block = cfg.block;
  args.inject = kv;
  auto res = model.forward(tape, params, args);
  auto flow = amf::soft_amf(res.capture->q_mean, res.capture->k_mean, mc.frames, grid, static_cast<T>(cfg.tau));
  return amf::amf_loss(ref, flow);
}

namespace {

template <typename T>
void dump_state(const DumpTarget& dump, const Tensor<T>& z_t, const Tensor<T>& delta, std::size_t t,
                std::size_t inner, const std::string& reason) {
  if (dump.dir.empty()) return;
  const fs::path dir = dump.dir / ("nonfinite_t" + std::to_string(t) + "_k" + std::to_string(inner));
  fs::create_directories(dir);
  vtns::save(dir / "z_t.vtns", z_t);
  vtns::save(dir / "posemb_delta.vtns", delta);
  vtns::write_file(dir / "reason.json", json{{"t", t}, {"inner_step", inner}, {"reason", reason}}.dump(2) + "\n");
}

}  // namespace

template <typename T>
double optimize_step(const DiTModel<T>& model, Tensor<T>& z_t, Tensor<T>& delta, std::size_t t, std::size_t cond,
                     const amf::MotionFlow& ref, const GuidanceConfig& cfg, AdamState<T>& adam, double lr,
                     const KVCache<T>* kv, const DumpTarget& dump) {
  const bool latent_mode = cfg.target == TargetMode::latent;
  Tape<T> tape;
  auto params = model.bind(tape, false);
  auto z = tape.leaf(z_t, latent_mode);
  auto d = tape.leaf(delta, !latent_mode);
  double loss_value = 0.0;
  try {
    auto loss = guidance_loss(tape, model, params, z, std::optional<Var<T>>(d), t, cond, ref, cfg, kv);
    loss_value = double(loss.value().item());
    tape.backward(loss);
  } catch (const NonFiniteError& e) {
    dump_state(dump, z_t, delta, t, adam.step, e.what());
    throw NonFiniteError("guidance aborted at t=" + std::to_string(t) + ", inner step " + std::to_string(adam.step) +
                         ": " + e.what());
  }
  auto g = tape.value(latent_mode ? z.id() : d.id()).grad();
  Tensor<T>& target = latent_mode ? z_t : delta;
  if (adam.m.size() != target.size()) adam = AdamState<T>(target.size());
  adam.update(target.values(), g, lr);
  if (!target.all_finite()) {
    dump_state(dump, z_t, delta, t, adam.step, "non-finite target after update");
    throw NonFiniteError("guidance aborted at t=" + std::to_string(t) + ": non-finite target after update");
  }
  return loss_value;
}

std::string loss_trace_csv(const std::vector<LossRecord>& trace) {
  std::string out = "t,inner_step,loss,lr\n";
  char buf[128];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g\n", r.t, r.inner_step, r.loss, r.lr);
    out += buf;
  }
  return out;
}

// ---- embedding sets ------------------------------------------------------------

namespace {

std::string delta_file(std::size_t t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "delta_t%04zu.vtns", t);
  return buf;
}

}  // namespace

void OptimizedEmbeddingSet::save(const fs::path& dir) const {
  fs::create_directories(dir);
  json steps = json::object();
  for (const auto& [t, d] : deltas) {
    vtns::save(dir / delta_file(t), d);
    steps[std::to_string(t)] = delta_file(t);
  }
  json prov{{"format", "ditflow-embeddings/1"}, {"reference_id", reference_id}, {"cond", cond},
            {"config_hash", config_hash},       {"guidance", guidance},          {"steps", steps}};
  vtns::write_file(dir / "provenance.json", prov.dump(2) + "\n");
}

OptimizedEmbeddingSet OptimizedEmbeddingSet::load(const fs::path& dir) {
  const fs::path ppath = dir / "provenance.json";
  if (!fs::exists(ppath)) throw FormatError("embedding set provenance not found: " + ppath.string());
  OptimizedEmbeddingSet set;
  try {
    const json prov = json::parse(vtns::read_file(ppath));
    if (prov.value("format", "") != "ditflow-embeddings/1") throw FormatError("unsupported embedding set format");
    set.reference_id = prov.at("reference_id").get<std::string>();
    set.cond = prov.at("cond").get<std::size_t>();
    set.config_hash = prov.at("config_hash").get<std::uint64_t>();
    set.guidance = prov.at("guidance");
    for (const auto& [key, file] : prov.at("steps").items()) {
      const fs::path f = dir / file.get<std::string>();
      if (!fs::exists(f)) throw FormatError("embedding delta not found: " + f.string());
      set.deltas.emplace(static_cast<std::size_t>(std::stoul(key)), vtns::load<float>(f));
    }
  } catch (const json::exception& e) {
    throw FormatError("embedding set " + ppath.string() + ": " + e.what());
  }
  return set;
}

// ---- sampling ------------------------------------------------------------------

Tensor<float> initial_latent(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "z_T"));
  return rng.normal_tensor<float>(cfg.latent_shape());
}

namespace {

void check_kv(const DiTModel<float>& model, const KVCache<float>* kv) {
  if (!kv) return;
  if (kv->block >= model.config().blocks) throw ConfigError("KV cache block out of range");
}

// Runs the plain sampler from z at step t_from down to 1, with an optional
// per-step embedding delta.
template <typename DeltaAt>
Tensor<float> run_sampler(const DiTModel<float>& model, Tensor<float> z, std::size_t t_from, std::size_t cond,
                          const KVCache<float>* kv, DeltaAt delta_at) {
  const auto& sch = model.schedule();
  for (std::size_t t = t_from; t >= 1; --t) {
    const Tensor<float>* delta = delta_at(t);
    auto eps = model.predict_noise(z, t, cond, delta, kv);
    z = sch.ddim_step(z, eps, t);
  }
  return z;
}

}  // namespace

Tensor<float> sample_unguided(const DiTModel<float>& model, std::size_t cond, std::uint64_t seed,
                              const KVCache<float>* kv) {
  check_kv(model, kv);
  const auto& mc = model.config();
  return run_sampler(model, initial_latent(mc, seed), mc.steps, cond, kv,
                     [](std::size_t) -> const Tensor<float>* { return nullptr; });
}

GenerationResult ditflow_generate(const DiTModel<float>& model, const amf::MotionFlow& ref, const KVCache<float>* kv,
                                  std::size_t cond, const GuidanceConfig& cfg, const std::string& reference_id,
                                  const DumpTarget& dump) {
  const auto& mc = model.config();
  cfg.validate(mc);
  if (cfg.inject_kv != (kv != nullptr))
    throw ConfigError(cfg.inject_kv ? "KV injection enabled but no cache given" : "KV cache given but injection disabled");
  if (kv && kv->block != cfg.injection_block) throw ConfigError("KV cache block differs from the injection block");
  if (ref.frames != mc.frames || !(ref.grid == amf::grid_of(mc)))
    throw ShapeError("reference flow geometry does not match the model");
  if (cond > mc.cond_vocab) throw ConfigError("condition " + std::to_string(cond) + " outside [0, vocab]");

  const auto& sch = model.schedule();
  const std::size_t steps = mc.steps;
  const bool latent_mode = cfg.target == TargetMode::latent;
  GenerationResult result;
  if (!latent_mode) {
    result.embeddings.emplace();
    result.embeddings->reference_id = reference_id;
    result.embeddings->cond = cond;
    result.embeddings->config_hash = mc.geometry_hash();
    result.embeddings->guidance = config_to_json(cfg);
  }
  Tensor<float> z = initial_latent(mc, cfg.seed);
  Tensor<float> delta(model.posemb().base.dims());
  AdamState<float> adam;
  for (std::size_t t = steps; t >= 1; --t) {
    const bool guided = cfg.is_guided(t, steps);
    if (guided) {
      const double lr = lr_at(t, cfg, steps);
      adam = AdamState<float>(latent_mode ? z.size() : delta.size());
      for (std::size_t k = 0; k < cfg.k_opt; ++k) {
        const double loss = optimize_step(model, z, delta, t, cond, ref, cfg, adam, lr, kv, dump);
        result.trace.push_back({t, k, loss, lr});
      }
      if (!latent_mode) result.embeddings->deltas.emplace(t, delta);
      if (latent_mode && !cfg.is_guided(t - 1, steps)) result.replay = LatentReplayState{t, z};
    }
    // Outside the window the base embedding is used again.
    const Tensor<float>* d = (guided && !latent_mode && cfg.k_opt > 0) ? &delta : nullptr;
    auto eps = model.predict_noise(z, t, cond, d, kv);
    z = sch.ddim_step(z, eps, t);
  }
  result.video = std::move(z);
  return result;
}

Tensor<float> zero_shot_generate(const DiTModel<float>& model, const OptimizedEmbeddingSet& emb, std::size_t cond,
                                 std::uint64_t seed, const KVCache<float>* kv) {
  const auto& mc = model.config();
  if (emb.config_hash != mc.geometry_hash())
    throw ConfigError("embedding set was optimized for a different model geometry");
  check_kv(model, kv);
  GuidanceConfig g = config_from_json(emb.guidance);
  for (std::size_t t = 1; t <= mc.steps; ++t) {
    if (g.is_guided(t, mc.steps) && !emb.deltas.count(t))
      throw ConfigError("embedding set has no delta for guided step " + std::to_string(t));
  }
  for (const auto& [t, d] : emb.deltas)
    if (d.dims() != model.posemb().base.dims())
      throw ShapeError("embedding delta for step " + std::to_string(t) + " has dims " + to_string(d.dims()));
  const bool apply = g.k_opt > 0;
  return run_sampler(model, initial_latent(mc, seed), mc.steps, cond, kv, [&](std::size_t t) -> const Tensor<float>* {
    if (!apply) return nullptr;
    auto it = emb.deltas.find(t);
    return it == emb.deltas.end() ? nullptr : &it->second;
  });
}

Tensor<float> replay_latent(const DiTModel<float>& model, const LatentReplayState& state, std::size_t cond,
                            const KVCache<float>* kv) {
  const auto& mc = model.config();
  if (state.t < 1 || state.t > mc.steps) throw ConfigError("replay state step out of range");
  if (state.z.dims() != mc.latent_shape()) throw ShapeError("replay state dims " + to_string(state.z.dims()));
  check_kv(model, kv);
  return run_sampler(model, state.z, state.t, cond, kv, [](std::size_t) -> const Tensor<float>* { return nullptr; });
}

amf::MotionFlow video_flow(const DiTModel<float>& model, const Tensor<float>& video, const GuidanceConfig& cfg) {
  return amf::extract_reference_amf(model, video, cfg.block, cfg.tau);
}

template KVCache<float> capture_reference_kv(const DiTModel<float>&, const Tensor<float>&, std::size_t);
template KVCache<double> capture_reference_kv(const DiTModel<double>&, const Tensor<double>&, std::size_t);
template Var<float> guidance_loss(Tape<float>&, const DiTModel<float>&, const std::vector<Var<float>>&, Var<float>,
                                  std::optional<Var<float>>, std::size_t, std::size_t, const amf::MotionFlow&,
                                  const GuidanceConfig&, const KVCache<float>*);
template Var<double> guidance_loss(Tape<double>&, const DiTModel<double>&, const std::vector<Var<double>>&,
                                   Var<double>, std::optional<Var<double>>, std::size_t, std::size_t,
                                   const amf::MotionFlow&, const GuidanceConfig&, const KVCache<double>*);
template double optimize_step(const DiTModel<float>&, Tensor<float>&, Tensor<float>&, std::size_t, std::size_t,
                              const amf::MotionFlow&, const GuidanceConfig&, AdamState<float>&, double,
                              const KVCache<float>*, const DumpTarget&);
template double optimize_step(const DiTModel<double>&, Tensor<double>&, Tensor<double>&, std::size_t, std::size_t,
                              const amf::MotionFlow&, const GuidanceConfig&, AdamState<double>&, double,
                              const KVCache<double>*, const DumpTarget&);

}  // namespace ditflow::guidance
