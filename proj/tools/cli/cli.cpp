#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "ditflow/bench.hpp"
#include "ditflow/checkpoint.hpp"
#include "ditflow/errors.hpp"
#include "ditflow/evalkit.hpp"
#include "ditflow/gradsuite.hpp"
#include "ditflow/guidance.hpp"
#include "ditflow/synthgen.hpp"
#include "ditflow/vtns.hpp"

namespace ditflow::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kRunFormat = "ditflow-run/1";
inline constexpr const char* kVersion = "0.1.0";

// ---- parameter table -------------------------------------------------------------

namespace {

using P = ParamType;

Param req(std::string name, ParamType type, std::string help) { return {std::move(name), type, nullptr, std::move(help), true}; }

std::vector<Param> guidance_params(std::string target_default) {
  return {
      {"target", P::text, std::move(target_default), "optimization target: latent or posemb"},
      {"block", P::uint, nullptr, "guidance block (default: mid depth)"},
      {"tau", P::real, 2.0, "attention temperature"},
      {"kopt", P::uint, 5, "Adam steps per guided denoising step"},
      {"topt", P::real, 0.2, "fraction of denoising steps that are guided"},
      {"lr_start", P::real, 0.002, "learning rate at the first guided step"},
      {"lr_end", P::real, 0.001, "learning rate at the last guided step"},
      {"inject_kv", P::boolean, true, "inject reference keys and values"},
      {"injection_block", P::uint, 0, "block receiving the reference keys and values"},
  };
}

std::vector<Command> build_commands() {
  std::vector<Command> cmds;
  cmds.push_back({"gen-data",
                  "generate a synthetic clip dataset",
                  {
                      {"count", P::uint, 2048, "number of clips"},
                      {"seed", P::uint, 1, "dataset seed"},
                      {"cell_multiple", P::boolean, false, "whole-cell velocities only"},
                      {"pixel_noise", P::real, 0.0, "per-frame pixel noise stddev"},
                      {"conditions", P::uint_list, json::array({1, 2, 3, 4, 5, 6}), "condition ids, comma separated"},
                      {"model_config", P::path, "", "model config JSON (default: built-in toy config)"},
                  }});
  cmds.push_back({"train",
                  "train the toy video model",
                  {
                      {"data", P::path, "", "dataset directory (default: generate inline)"},
                      {"clips", P::uint, 2048, "inline dataset size"},
                      {"data_seed", P::uint, 1, "inline dataset seed"},
                      {"epochs", P::uint, 8, "training epochs"},
                      {"lr", P::real, 1e-3, "Adam learning rate"},
                      {"batch", P::uint, 16, "batch size"},
                      {"cond_dropout", P::real, 0.2, "fraction trained with the empty condition"},
                      {"grad_clip", P::real, 1.0, "global gradient-norm clip, 0 disables"},
                      {"holdout", P::uint, 64, "held-out clips"},
                      {"seed", P::uint, 7, "training seed"},
                      {"model_config", P::path, "", "model config JSON (default: built-in toy config)"},
                  }});
  cmds.push_back({"sample",
                  "plain sampling without motion guidance",
                  {
                      req("ckpt", P::path, "checkpoint directory"),
                      {"cond", P::uint, 1, "condition id (0: empty)"},
                      {"seed", P::uint, 0, "noise seed"},
                      {"block", P::uint, nullptr, "block for the output flow (default: mid depth)"},
                      {"tau", P::real, 2.0, "temperature for the output flow"},
                      {"ref", P::path, "", "reference clip (VTNS) for key/value injection"},
                      {"inject_kv", P::boolean, false, "inject reference keys and values"},
                      {"injection_block", P::uint, 0, "block receiving the reference keys and values"},
                  }});
  cmds.push_back({"extract-amf",
                  "motion flow of a clip",
                  {
                      req("ckpt", P::path, "checkpoint directory"),
                      req("clip", P::path, "clip (VTNS [F, C, H, W])"),
                      {"block", P::uint, nullptr, "capture block (default: mid depth)"},
                      {"tau", P::real, 2.0, "attention temperature"},
                      {"mode", P::text, "hard", "hard or soft"},
                      {"nn", P::boolean, true, "also write the nearest-neighbour flow"},
                  }});
  {
    Command c{"transfer", "guided sampling toward a reference clip's motion", {}};
    c.params = {req("ckpt", P::path, "checkpoint directory"), req("ref", P::path, "reference clip (VTNS)"),
                {"cond", P::uint, 1, "condition id of the output"}, {"seed", P::uint, 0, "noise seed"}};
    for (auto& p : guidance_params("latent")) c.params.push_back(std::move(p));
    c.params.push_back({"baseline", P::boolean, true, "also sample the unguided baseline"});
    c.params.push_back({"reference_id", P::text, "", "reference name stored with embeddings (default: file stem)"});
    cmds.push_back(std::move(c));
  }
  cmds.push_back({"zero-shot",
                  "reuse optimized embeddings or a latent state under another condition",
                  {
                      req("ckpt", P::path, "checkpoint directory"),
                      {"embeddings", P::path, "", "embedding set directory from a posemb transfer"},
                      {"latent_state", P::path, "", "replay_state.vtns from a latent transfer"},
                      {"cond", P::uint, nullptr, "condition id (default: the stored one)"},
                      {"seed", P::uint, nullptr, "noise seed (default: the stored one)"},
                      {"ref", P::path, "", "reference clip, needed when keys and values are injected"},
                      {"inject_kv", P::boolean, nullptr, "inject reference keys and values (default: as stored)"},
                  }});
  cmds.push_back({"eval",
                  "flow agreement report",
                  {
                      req("ref", P::path, "reference flow (VTNS)"),
                      req("guided", P::path, "guided video flow"),
                      req("unguided", P::path, "unguided video flow"),
                      {"zero_shot", P::path, "", "zero-shot video flow"},
                      {"nn", P::path, "", "nearest-neighbour flow"},
                      {"trace", P::path, "", "loss trace CSV"},
                      {"policy", P::text, "reference_nonzero", "all, reference_nonzero or valid_mask"},
                  }});
  cmds.push_back({"grad-check",
                  "finite-difference gradient checks",
                  {
                      {"suite", P::text, "all", "all, ops, amf or end_to_end"},
                      {"seed", P::uint, 1, "seed"},
                      {"trials", P::uint, 10, "random instances per op"},
                  }});
  {
    Command c{"ablate", "transfer benchmark over one swept setting", {}};
    c.params = {req("ckpt", P::path, "checkpoint directory"),
                req("axis", P::text, "block, topt or kopt"),
                req("values", P::real_list, "comma separated values"),
                {"clips", P::uint, 10, "benchmark clips"},
                {"seeds", P::uint, 1, "seeds per clip"},
                {"bench_seed", P::uint, 1234, "benchmark clip seed"},
                {"seed", P::uint, 1000, "first noise seed"},
                {"policy", P::text, "reference_nonzero", "cosine mask policy"}};
    for (auto& p : guidance_params("latent")) c.params.push_back(std::move(p));
    cmds.push_back(std::move(c));
  }
  return cmds;
}

std::string flag_of(const std::string& name) {
  std::string f = "--" + name;
  std::replace(f.begin(), f.end(), '_', '-');
  return f;
}

}  // namespace

const std::vector<Command>& commands() {
  static const std::vector<Command> cmds = build_commands();
  return cmds;
}

const Command& command(const std::string& name) {
  for (const auto& c : commands())
    if (c.name == name) return c;
  throw UsageError("unknown command '" + name + "'");
}

json default_args(const std::string& name) {
  json out = json::object();
  for (const auto& p : command(name).params) out[p.name] = p.fallback;
  return out;
}

namespace {

json check_value(const Param& p, const json& v) {
  const std::string flag = flag_of(p.name);
  auto bad = [&](const char* what) { return UsageError(flag + " expects " + what + ", got " + v.dump()); };
  switch (p.type) {
    case P::uint:
      if (v.is_number_unsigned()) return v;
      if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return v.get<std::uint64_t>();
      throw bad("a non-negative integer");
    case P::real:
      if (!v.is_number()) throw bad("a number");
      if (!std::isfinite(v.get<double>())) throw bad("a finite number");
      return v.get<double>();
    case P::boolean:
      if (!v.is_boolean()) throw bad("true or false");
      return v;
    case P::text:
      if (!v.is_string()) throw bad("a string");
      return v;
    case P::path: {
      if (!v.is_string()) throw bad("a path");
      const auto s = v.get<std::string>();
      return s.empty() ? s : fs::absolute(s).lexically_normal().string();
    }
    case P::real_list:
    case P::uint_list: {
      if (!v.is_array() || v.empty()) throw bad("a non-empty list");
      json out = json::array();
      for (const auto& e : v) {
        Param inner = p;
        inner.type = p.type == P::real_list ? P::real : P::uint;
        out.push_back(check_value(inner, e));
      }
      return out;
    }
  }
  return v;
}

}  // namespace

json resolve_args(const std::string& name, const json& given) {
  const auto& cmd = command(name);
  if (!given.is_object()) throw UsageError("arguments must be a JSON object");
  for (const auto& [key, _] : given.items()) {
    const bool known = std::any_of(cmd.params.begin(), cmd.params.end(), [&](const Param& p) { return p.name == key; });
    if (!known) throw UsageError(name + ": unknown argument '" + key + "'");
  }
  json out = json::object();
  for (const auto& p : cmd.params) {
    const json v = given.contains(p.name) ? given.at(p.name) : p.fallback;
    if (v.is_null()) {
      if (p.required) throw UsageError(name + ": missing required " + flag_of(p.name));
      out[p.name] = nullptr;
      continue;
    }
    out[p.name] = check_value(p, v);
    if (p.required && p.type == P::path && out[p.name].get<std::string>().empty())
      throw UsageError(name + ": missing required " + flag_of(p.name));
  }
  return out;
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex(std::uint64_t v, int width) {
  std::ostringstream os;
  os << std::hex << std::setw(width) << std::setfill('0') << v;
  return os.str();
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::vector<std::string> list_outputs(const fs::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel != "manifest.json") out.push_back(rel);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

fs::path default_run_dir(const std::string& name, const json& args) {
  const char* root = std::getenv("DITFLOW_OUT_ROOT");
  const fs::path base = root && *root ? fs::path(root) : fs::path("runs");
  return fs::absolute(base / (name + "-" + hex(fnv1a(name + args.dump()) >> 32, 8)));
}

std::string encode_pgm(const Tensor<float>& video, std::size_t frame, std::size_t channel) {
  if (video.rank() != 4) throw ShapeError("encode_pgm: expected [F, C, H, W], got " + to_string(video.dims()));
  const std::size_t c = video.dim(1), h = video.dim(2), w = video.dim(3);
  if (frame >= video.dim(0) || channel >= c) throw ShapeError("encode_pgm: frame or channel out of range");
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const std::size_t base = (frame * c + channel) * h * w;
  for (std::size_t i = 0; i < h * w; ++i) {
    const double x = std::clamp(double(video[base + i]), -1.0, 1.0);
    out.push_back(char(static_cast<unsigned char>(std::lround((x + 1.0) * 127.5))));
  }
  return out;
}

// ---- subcommands ---------------------------------------------------------------

namespace {

struct Ctx {
  fs::path dir;
  const json& args;
  std::ostream& log;
  json inputs = json::object();
  json summary = json::object();
  int exit_code = 0;

  fs::path out(const std::string& rel) const {
    const auto p = dir / rel;
    fs::create_directories(p.parent_path());
    return p;
  }
  std::string str(const char* k) const { return args.at(k).get<std::string>(); }
  std::size_t uint(const char* k) const { return args.at(k).get<std::size_t>(); }
  double real(const char* k) const { return args.at(k).get<double>(); }
  bool flag(const char* k) const { return args.at(k).get<bool>(); }
  bool has(const char* k) const { return !args.at(k).is_null() && !(args.at(k).is_string() && str(k).empty()); }
};

void write_text(const fs::path& path, const std::string& text) { vtns::write_file(path, text); }

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

ModelConfig model_config_arg(const Ctx& ctx) {
  if (!ctx.has("model_config")) return ModelConfig{};
  const fs::path p = ctx.str("model_config");
  try {
    return config_from_json(json::parse(vtns::read_file(p)));
  } catch (const json::exception& e) {
    throw FormatError("model config " + p.string() + ": " + e.what());
  }
}

DiTModel<float> load_model(Ctx& ctx) {
  auto model = load_checkpoint(ctx.str("ckpt"));
  ctx.inputs["ckpt"] = {{"path", ctx.str("ckpt")}, {"weights_checksum", model.weights_checksum()}};
  return model;
}

Tensor<float> load_clip(Ctx& ctx, const char* key, const ModelConfig& mc) {
  auto clip = vtns::load<float>(ctx.str(key));
  if (clip.dims() != mc.latent_shape())
    throw ShapeError(flag_of(key) + ": clip dims " + to_string(clip.dims()) + " do not match the model latent " +
                     to_string(mc.latent_shape()));
  ctx.inputs[key] = {{"path", ctx.str(key)}, {"fnv1a", fnv1a(vtns::encode(clip))}};
  return clip;
}

void save_video(const Ctx& ctx, const std::string& name, const Tensor<float>& video) {
  vtns::save(ctx.out("tensors/" + name + ".vtns"), video);
  for (std::size_t f = 0; f < video.dim(0); ++f)
    for (std::size_t c = 0; c < video.dim(1); ++c) {
      std::string file = "frames/" + name + "_f" + std::to_string(f);
      if (video.dim(1) > 1) file += "_c" + std::to_string(c);
      write_text(ctx.out(file + ".pgm"), encode_pgm(video, f, c));
    }
}

void save_flow(const Ctx& ctx, const std::string& name, const amf::MotionFlow& flow) {
  amf::save_flow(ctx.out("tensors/" + name + ".vtns"), flow);
}

std::size_t block_arg(const Ctx& ctx, const ModelConfig& mc) {
  return ctx.has("block") ? ctx.uint("block") : guidance::GuidanceConfig::defaults_for(mc).block;
}

guidance::GuidanceConfig guidance_arg(const Ctx& ctx, const ModelConfig& mc) {
  auto g = guidance::GuidanceConfig::defaults_for(mc);
  g.block = block_arg(ctx, mc);
  g.tau = ctx.real("tau");
  g.k_opt = ctx.uint("kopt");
  g.t_opt_fraction = ctx.real("topt");
  g.lr_start = ctx.real("lr_start");
  g.lr_end = ctx.real("lr_end");
  g.target = guidance::parse_target(ctx.str("target"));
  g.inject_kv = ctx.flag("inject_kv");
  g.injection_block = ctx.uint("injection_block");
  g.seed = ctx.uint("seed");
  g.validate(mc);
  return g;
}

void check_cond(std::size_t cond, const ModelConfig& mc) {
  if (cond > mc.cond_vocab)
    throw ConfigError("condition " + std::to_string(cond) + " outside 0.." + std::to_string(mc.cond_vocab));
}

void cmd_gen_data(Ctx& ctx) {
  const auto mc = model_config_arg(ctx);
  synth::SpecOptions opts;
  opts.cell_multiple = ctx.flag("cell_multiple");
  opts.pixel_noise = ctx.real("pixel_noise");
  opts.conditions = ctx.args.at("conditions").get<std::vector<std::size_t>>();
  for (auto c : opts.conditions)
    if (c < 1 || c > synth::kConditionCount) throw ConfigError("condition ids must lie in 1..6");
  if (opts.pixel_noise < 0) throw ConfigError("--pixel-noise must be non-negative");
  const auto ds = synth::gen_dataset(ctx.uint("count"), ctx.uint("seed"), mc, opts);
  synth::save_dataset(ctx.out("data/manifest.json").parent_path(), ds);
  if (!ds.clips.empty()) save_video(ctx, "clip_00000", ds.clips.front().pixels);
  ctx.summary["clips"] = ds.clips.size();
  ctx.log << "wrote " << ds.clips.size() << " clips\n";
}

void cmd_train(Ctx& ctx) {
  auto mc = model_config_arg(ctx);
  synth::Dataset ds;
  if (ctx.has("data")) {
    ds = synth::load_dataset(ctx.str("data"));
    ctx.inputs["data"] = {{"path", ctx.str("data")}, {"seed", ds.seed}, {"clips", ds.clips.size()}};
    const auto& g = ds.geometry;
    if (g.frames != mc.frames || g.channels != mc.channels || g.height != mc.height || g.width != mc.width)
      throw ConfigError("dataset geometry does not match the model config");
  } else {
    ds = synth::gen_dataset(ctx.uint("clips"), ctx.uint("data_seed"), mc);
  }
  synth::TrainOptions opts;
  opts.epochs = ctx.uint("epochs");
  opts.lr = ctx.real("lr");
  opts.batch_size = ctx.uint("batch");
  opts.cond_dropout = ctx.real("cond_dropout");
  opts.grad_clip = ctx.real("grad_clip");
  opts.holdout_clips = ctx.uint("holdout");
  opts.seed = ctx.uint("seed");
  opts.log_every = 32;
  auto progress = [&](std::size_t epoch, std::size_t batch, double loss) {
    if (batch == 0)
      ctx.log << "epoch " << epoch << " holdout mse " << loss << "\n";
    else
      ctx.log << "epoch " << epoch << " batch " << batch << " loss " << loss << "\n";
  };
  try {
    auto res = synth::train_toy_dit(ds, mc, opts, progress);
    const double final_mse = res.curve.empty() ? res.untrained_holdout_mse : res.curve.back().holdout_mse;
    json info = {{"args", ctx.args}, {"untrained_holdout_mse", res.untrained_holdout_mse}, {"holdout_mse", final_mse}};
    save_checkpoint(ctx.dir / "checkpoint", res.model, info);
    write_text(ctx.out("metrics/loss_curve.csv"), synth::curve_csv(res.curve));
    ctx.summary = {{"untrained_holdout_mse", res.untrained_holdout_mse},
                   {"holdout_mse", final_mse},
                   {"weights_checksum", res.model.weights_checksum()}};
    ctx.log << "holdout mse " << res.untrained_holdout_mse << " -> " << final_mse << "\n";
  } catch (const synth::TrainingDiverged& e) {
    save_checkpoint(ctx.dir / "checkpoint_last_good", e.last_good(), {{"args", ctx.args}, {"diverged_at_epoch", e.epoch()}});
    ctx.summary = {{"diverged", e.what()}, {"epoch", e.epoch()}};
    ctx.log << "training diverged: " << e.what() << "\n";
    ctx.exit_code = 1;
  }
}

std::optional<KVCache<float>> reference_kv(Ctx& ctx, const DiTModel<float>& model, bool inject, std::size_t block) {
  if (!inject) return std::nullopt;
  if (!ctx.has("ref")) throw UsageError("key/value injection needs --ref");
  return guidance::capture_reference_kv(model, load_clip(ctx, "ref", model.config()), block);
}

void cmd_sample(Ctx& ctx) {
  const auto model = load_model(ctx);
  const auto& mc = model.config();
  const std::size_t cond = ctx.uint("cond");
  check_cond(cond, mc);
  const auto kv = reference_kv(ctx, model, ctx.flag("inject_kv"), ctx.uint("injection_block"));
  const auto video = guidance::sample_unguided(model, cond, ctx.uint("seed"), kv ? &*kv : nullptr);
  save_video(ctx, "video", video);
  save_flow(ctx, "video_amf", amf::extract_reference_amf(model, video, block_arg(ctx, mc), ctx.real("tau")));
}

void cmd_extract_amf(Ctx& ctx) {
  const auto model = load_model(ctx);
  const auto& mc = model.config();
  const auto clip = load_clip(ctx, "clip", mc);
  const std::size_t block = block_arg(ctx, mc);
  if (block >= mc.blocks) throw ConfigError("--block must be below " + std::to_string(mc.blocks));
  const double tau = ctx.real("tau");
  if (!(tau > 0)) throw ConfigError("--tau must be positive");
  const auto mode = amf::parse_mode(ctx.str("mode"));
  const auto flow = mode == amf::FlowMode::hard ? amf::extract_reference_amf(model, clip, block, tau)
                                                : amf::soft_amf(model.capture(clip, 0, 0, block), amf::grid_of(mc), tau);
  save_flow(ctx, "amf", flow);
  if (ctx.flag("nn")) {
    const auto nn = amf::nn_displacement(clip, mc.patch);
    save_flow(ctx, "nn_flow", nn);
    ctx.summary["agreement_with_nn"] =
        eval::report_to_json(eval::displacement_agreement(flow, nn, eval::MaskPolicy::reference_nonzero));
  }
  ctx.summary["total_variation"] = eval::total_variation(flow);
}

void cmd_transfer(Ctx& ctx) {
  const auto model = load_model(ctx);
  const auto& mc = model.config();
  const std::size_t cond = ctx.uint("cond");
  check_cond(cond, mc);
  const auto g = guidance_arg(ctx, mc);
  const auto clip = load_clip(ctx, "ref", mc);
  const auto ref = amf::extract_reference_amf(model, clip, g.block, g.tau);
  std::optional<KVCache<float>> kv;
  if (g.inject_kv) kv = guidance::capture_reference_kv(model, clip, g.injection_block);
  const std::string ref_id = ctx.has("reference_id") ? ctx.str("reference_id") : fs::path(ctx.str("ref")).stem().string();

  auto res = guidance::ditflow_generate(model, ref, kv ? &*kv : nullptr, cond, g, ref_id, {ctx.dir / "dumps"});
  save_video(ctx, "video", res.video);
  save_flow(ctx, "ref_amf", ref);
  const auto guided_flow = guidance::video_flow(model, res.video, g);
  save_flow(ctx, "video_amf", guided_flow);
  write_text(ctx.out("metrics/loss_trace.csv"), guidance::loss_trace_csv(res.trace));
  if (res.embeddings) res.embeddings->save(ctx.out("embeddings/provenance.json").parent_path());
  if (res.replay) {
    vtns::save(ctx.out("tensors/replay_state.vtns"), res.replay->z);
    write_json(ctx.out("tensors/replay_state.json"),
               {{"t", res.replay->t}, {"cond", cond}, {"reference_id", ref_id}, {"guidance", guidance::config_to_json(g)}});
  }

  const auto policy = eval::MaskPolicy::reference_nonzero;
  ctx.summary["guided"] = eval::report_to_json(eval::displacement_agreement(guided_flow, ref, policy));
  if (!res.trace.empty()) {
    ctx.summary["first_loss"] = res.trace.front().loss;
    ctx.summary["last_loss"] = res.trace.back().loss;
  }
  if (ctx.flag("baseline")) {
    const auto plain = guidance::sample_unguided(model, cond, g.seed);
    save_video(ctx, "unguided", plain);
    const auto plain_flow = guidance::video_flow(model, plain, g);
    save_flow(ctx, "unguided_amf", plain_flow);
    ctx.summary["unguided"] = eval::report_to_json(eval::displacement_agreement(plain_flow, ref, policy));
  }
  write_json(ctx.out("metrics/transfer.json"), ctx.summary);
  ctx.log << "guided cosine " << ctx.summary["guided"]["mean_cosine"].get<double>();
  if (ctx.summary.contains("unguided"))
    ctx.log << ", unguided " << ctx.summary["unguided"]["mean_cosine"].get<double>();
  ctx.log << "\n";
}

void cmd_zero_shot(Ctx& ctx) {
  const auto model = load_model(ctx);
  const auto& mc = model.config();
  const bool by_emb = ctx.has("embeddings"), by_state = ctx.has("latent_state");
  if (by_emb == by_state) throw UsageError("zero-shot needs exactly one of --embeddings and --latent-state");

  guidance::GuidanceConfig g;
  std::size_t stored_cond = 0;
  std::optional<guidance::OptimizedEmbeddingSet> emb;
  std::optional<guidance::LatentReplayState> state;
  if (by_emb) {
    emb = guidance::OptimizedEmbeddingSet::load(ctx.str("embeddings"));
    g = guidance::config_from_json(emb->guidance);
    stored_cond = emb->cond;
    ctx.inputs["embeddings"] = {{"path", ctx.str("embeddings")}, {"reference_id", emb->reference_id}};
  } else {
    const fs::path p = ctx.str("latent_state");
    const fs::path side = fs::path(p).replace_extension(".json");
    if (!fs::exists(side)) throw FormatError("latent state sidecar not found: " + side.string());
    json meta;
    try {
      meta = json::parse(vtns::read_file(side));
      state = guidance::LatentReplayState{meta.at("t").get<std::size_t>(), vtns::load<float>(p)};
      g = guidance::config_from_json(meta.at("guidance"));
      stored_cond = meta.at("cond").get<std::size_t>();
    } catch (const json::exception& e) {
      throw FormatError("latent state sidecar " + side.string() + ": " + e.what());
    }
    ctx.inputs["latent_state"] = {{"path", p.string()}, {"t", state->t}};
  }
  g.validate(mc);
  const std::size_t cond = ctx.has("cond") ? ctx.uint("cond") : stored_cond;
  check_cond(cond, mc);
  const bool inject = ctx.has("inject_kv") ? ctx.flag("inject_kv") : g.inject_kv;
  const auto kv = reference_kv(ctx, model, inject, g.injection_block);
  const auto seed = ctx.has("seed") ? std::uint64_t(ctx.uint("seed")) : g.seed;
  const auto video = emb ? guidance::zero_shot_generate(model, *emb, cond, seed, kv ? &*kv : nullptr)
                         : guidance::replay_latent(model, *state, cond, kv ? &*kv : nullptr);
  save_video(ctx, "video", video);
  save_flow(ctx, "video_amf", guidance::video_flow(model, video, g));
  ctx.summary = {{"cond", cond}, {"inject_kv", inject}};
}

void cmd_eval(Ctx& ctx) {
  eval::ReportInputs in;
  in.reference_flow = ctx.str("ref");
  in.guided_flow = ctx.str("guided");
  in.unguided_flow = ctx.str("unguided");
  if (ctx.has("zero_shot")) in.zero_shot_flow = ctx.str("zero_shot");
  if (ctx.has("nn")) in.nn_flow = ctx.str("nn");
  if (ctx.has("trace")) in.loss_trace = ctx.str("trace");
  in.policy = eval::parse_policy(ctx.str("policy"));
  const auto bundle = eval::run_report(in);
  write_json(ctx.out("metrics/report.json"), bundle.report);
  write_text(ctx.out("metrics/report.csv"), bundle.csv);
  ctx.log << bundle.csv;
}

void cmd_grad_check(Ctx& ctx) {
  const std::string suite = ctx.str("suite");
  const std::uint64_t seed = ctx.uint("seed");
  const std::size_t trials = ctx.uint("trials");
  if (suite != "all" && suite != "ops" && suite != "amf" && suite != "end_to_end")
    throw ConfigError("--suite must be all, ops, amf or end_to_end");
  if (trials == 0) throw ConfigError("--trials must be positive");
  std::vector<GradCase> cases;
  auto add = [&](std::vector<GradCase> more) { cases.insert(cases.end(), more.begin(), more.end()); };
  if (suite == "all" || suite == "ops") add(op_gradient_suite(seed, trials));
  if (suite == "all" || suite == "amf") add(amf_gradient_suite(seed, trials));
  if (suite == "all" || suite == "end_to_end") add(end_to_end_gradient_suite(seed));
  std::ostringstream csv;
  csv << "suite,name,max_relative_error,tolerance,passed\n" << std::setprecision(6);
  std::size_t failed = 0;
  for (const auto& c : worst_per_case(cases)) {
    csv << c.suite << "," << c.name << "," << c.max_relative_error << "," << c.tolerance << ","
        << (c.passed() ? "true" : "false") << "\n";
    if (!c.passed()) {
      ++failed;
      ctx.log << "FAIL " << c.suite << " " << c.name << ": " << c.max_relative_error << " >= " << c.tolerance << "\n";
    }
  }
  write_text(ctx.out("metrics/grad_check.csv"), csv.str());
  ctx.summary = {{"checks", cases.size()}, {"failed_cases", failed}};
  ctx.log << cases.size() << " checks, " << failed << " failing cases\n";
  if (failed) ctx.exit_code = 1;
}

void cmd_ablate(Ctx& ctx) {
  const auto model = load_model(ctx);
  const auto& mc = model.config();
  const auto base = guidance_arg(ctx, mc);
  const std::string axis = ctx.str("axis");
  if (axis != "block" && axis != "topt" && axis != "kopt") throw ConfigError("--axis must be block, topt or kopt");
  const auto values = ctx.args.at("values").get<std::vector<double>>();
  std::vector<guidance::GuidanceConfig> configs;
  for (double v : values) {
    auto g = base;
    if (axis == "topt") {
      g.t_opt_fraction = v;
    } else {
      if (v < 0 || v != std::floor(v)) throw ConfigError("--values for " + axis + " must be non-negative integers");
      (axis == "block" ? g.block : g.k_opt) = std::size_t(v);
    }
    g.validate(mc);
    configs.push_back(g);
  }
  const auto policy = eval::parse_policy(ctx.str("policy"));
  const auto clips = bench::benchmark_clips(ctx.uint("clips"), ctx.uint("bench_seed"), mc);
  std::ostringstream csv;
  csv << "axis,value,mean_guided_cosine,mean_unguided_cosine,margin,mean_guided_epe\n" << std::setprecision(9);
  json rows = json::array();
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const auto s = bench::run_transfer_benchmark(model, clips, ctx.uint("seeds"), configs[i], ctx.uint("seed"), policy);
    csv << axis << "," << values[i] << "," << s.mean_guided << "," << s.mean_unguided << "," << s.margin() << ","
        << s.mean_guided_epe << "\n";
    rows.push_back({{"value", values[i]},
                    {"mean_guided_cosine", s.mean_guided},
                    {"mean_unguided_cosine", s.mean_unguided},
                    {"margin", s.margin()},
                    {"mean_guided_epe", s.mean_guided_epe}});
    ctx.log << axis << "=" << values[i] << ": guided " << s.mean_guided << ", unguided " << s.mean_unguided << "\n";
  }
  write_text(ctx.out("metrics/ablate.csv"), csv.str());
  write_json(ctx.out("metrics/ablate.json"), {{"axis", axis}, {"rows", rows}});
  ctx.summary = {{"rows", rows.size()}};
}

using CommandFn = void (*)(Ctx&);

CommandFn command_fn(const std::string& name) {
  static const std::map<std::string, CommandFn> fns = {
      {"gen-data", cmd_gen_data}, {"train", cmd_train},         {"sample", cmd_sample},
      {"extract-amf", cmd_extract_amf}, {"transfer", cmd_transfer}, {"zero-shot", cmd_zero_shot},
      {"eval", cmd_eval},         {"grad-check", cmd_grad_check}, {"ablate", cmd_ablate},
  };
  const auto it = fns.find(name);
  if (it == fns.end()) throw UsageError("unknown command '" + name + "'");
  return it->second;
}

void prepare_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw UsageError("run directory " + dir.string() + " is a file");
    if (!fs::is_empty(dir)) {
      if (!force) throw UsageError("run directory " + dir.string() + " is not empty (use --force to replace it)");
      if (!fs::exists(dir / "manifest.json"))
        throw UsageError("refusing to replace " + dir.string() + ": it holds no run manifest");
      fs::remove_all(dir);
    }
  }
  fs::create_directories(dir);
}

}  // namespace

RunResult execute(const std::string& name, const json& given, const fs::path& dir_in, std::ostream& log, bool force) {
  const auto fn = command_fn(name);
  const json args = resolve_args(name, given);
  const fs::path dir = fs::absolute(dir_in).lexically_normal();
  prepare_dir(dir, force);
  Ctx ctx{dir, args, log};
  fn(ctx);
  json manifest = {{"format", kRunFormat},
                   {"version", kVersion},
                   {"command", name},
                   {"args", args},
                   {"inputs", ctx.inputs},
                   {"summary", ctx.summary},
                   {"exit_code", ctx.exit_code},
                   {"outputs", list_outputs(dir)},
                   {"created", utc_now()}};
  write_json(dir / "manifest.json", manifest);
  return {dir, manifest, ctx.exit_code};
}

RunResult replay(const fs::path& manifest_path, const fs::path& dir, bool check, std::ostream& log, bool force) {
  json m;
  try {
    m = json::parse(vtns::read_file(manifest_path));
  } catch (const json::exception& e) {
    throw FormatError("run manifest " + manifest_path.string() + ": " + e.what());
  }
  if (m.value("format", "") != kRunFormat) throw FormatError("not a run manifest: " + manifest_path.string());
  const auto name = m.at("command").get<std::string>();
  auto res = execute(name, m.at("args"), dir, log, force);
  if (!check) return res;

  const fs::path orig = fs::absolute(manifest_path).parent_path();
  std::size_t mismatches = 0;
  const auto before = m.at("outputs").get<std::vector<std::string>>();
  const auto after = res.manifest.at("outputs").get<std::vector<std::string>>();
  if (before != after) {
    log << "output listing differs (" << before.size() << " recorded, " << after.size() << " replayed)\n";
    ++mismatches;
  }
  for (const auto& rel : before) {
    const auto a = orig / rel, b = res.dir / rel;
    if (!fs::exists(a) || !fs::exists(b) || vtns::read_file(a) != vtns::read_file(b)) {
      log << "mismatch: " << rel << "\n";
      ++mismatches;
    }
  }
  log << (mismatches ? "replay differs" : "replay identical") << " (" << before.size() << " outputs)\n";
  if (mismatches) res.exit_code = 1;
  return res;
}

// ---- argv ------------------------------------------------------------------------

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

json parse_scalar(const std::string& flag, ParamType type, const std::string& s) {
  std::size_t used = 0;
  try {
    if (type == P::uint) {
      if (s.empty() || s[0] == '-' || s[0] == '+') throw std::invalid_argument("sign");
      const auto v = std::stoull(s, &used);
      if (used == s.size()) return v;
    } else {
      const auto v = std::stod(s, &used);
      if (used == s.size()) return v;
    }
  } catch (const std::logic_error&) {
  }
  throw UsageError(flag + ": invalid value '" + s + "'");
}

json parse_flag_value(const Param& p, const std::string& s) {
  const auto flag = flag_of(p.name);
  switch (p.type) {
    case P::uint:
    case P::real:
      return parse_scalar(flag, p.type, s);
    case P::real_list:
    case P::uint_list: {
      json out = json::array();
      for (const auto& item : split_list(s)) out.push_back(parse_scalar(flag, p.type == P::real_list ? P::real : P::uint, item));
      if (out.empty()) throw UsageError(flag + ": empty list");
      return out;
    }
    default:
      return s;
  }
}

struct Bound {
  const Param* param;
  std::string text;
  std::int64_t on = 0;
  std::int64_t off = 0;
};

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

}  // namespace

int main_entry(int argc, char** argv) {
  CLI::App app{"ditflow: motion transfer with a toy video diffusion transformer", "ditflow"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  struct Sub {
    CLI::App* app;
    const Command* cmd;
    std::vector<Bound> bound;
    std::string out;
    bool force = false;
  };
  std::vector<Sub> subs;
  subs.reserve(commands().size());
  for (const auto& cmd : commands()) {
    Sub s{app.add_subcommand(cmd.name, cmd.help), &cmd, {}, {}, false};
    s.bound.reserve(cmd.params.size());
    subs.push_back(std::move(s));
    auto& sub = subs.back();
    for (const auto& p : cmd.params) {
      sub.bound.push_back({&p, {}, 0, 0});
      auto& b = sub.bound.back();
      const auto flag = flag_of(p.name);
      std::string help = p.help;
      if (!p.fallback.is_null() && !p.required) help += " [" + (p.fallback.is_string() ? p.fallback.get<std::string>() : p.fallback.dump()) + "]";
      if (p.type == P::boolean) {
        sub.app->add_flag(flag, b.on, help);
        sub.app->add_flag("--no-" + flag.substr(2), b.off, "disable " + flag);
      } else {
        auto* opt = sub.app->add_option(flag, b.text, help);
        if (p.required) opt->required();
      }
    }
    sub.app->add_option("--out", sub.out, "run directory (default: $DITFLOW_OUT_ROOT/<command>-<hash>)");
    sub.app->add_flag("--force", sub.force, "replace an existing run directory");
  }
  std::string manifest, replay_out;
  bool check = false, replay_force = false;
  auto* rep = app.add_subcommand("replay", "re-run a recorded command from its manifest");
  rep->add_option("--manifest", manifest, "manifest.json of a run")->required();
  rep->add_option("--out", replay_out, "run directory (default: <original>-replay)");
  rep->add_flag("--check", check, "require byte-identical outputs");
  rep->add_flag("--force", replay_force, "replace an existing run directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "ditflow: error: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    RunResult res;
    if (rep->parsed()) {
      const fs::path mp = fs::absolute(manifest);
      if (!fs::exists(mp)) throw UsageError("manifest not found: " + mp.string());
      const fs::path out = replay_out.empty() ? fs::path(mp.parent_path().string() + "-replay") : fs::path(replay_out);
      res = replay(mp, out, check, std::cout, replay_force);
    } else {
      const Sub* sub = nullptr;
      for (const auto& s : subs)
        if (s.app->parsed()) sub = &s;
      json given = json::object();
      for (const auto& b : sub->bound) {
        const auto& p = *b.param;
        if (p.type == P::boolean) {
          if (b.on && b.off) throw UsageError(flag_of(p.name) + " and --no-" + flag_of(p.name).substr(2) + " both given");
          if (b.on || b.off) given[p.name] = b.on > 0;
        } else if (sub->app->count(flag_of(p.name))) {
          given[p.name] = parse_flag_value(p, b.text);
        }
      }
      const auto& name = sub->cmd->name;
      const fs::path out = sub->out.empty() ? default_run_dir(name, resolve_args(name, given)) : fs::path(sub->out);
      res = execute(name, given, out, std::cout, sub->force);
    }
    std::cout << "run: " << res.dir.string() << "\n";
    return res.exit_code;
  } catch (const UsageError& e) {
    std::cerr << "ditflow: error: " << one_line(e.what()) << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "ditflow: error: " << one_line(e.what()) << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "ditflow: error: " << one_line(e.what()) << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "ditflow: error: " << one_line(e.what()) << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "ditflow: error: " << one_line(e.what()) << "\n";
    return 1;
  }
}

}  // namespace ditflow::cli
