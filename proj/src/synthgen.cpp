#include "ditflow/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "ditflow/adam.hpp"
#include "ditflow/checkpoint.hpp"
#include "ditflow/errors.hpp"
#include "ditflow/rng.hpp"
#include "ditflow/vtns.hpp"

namespace ditflow::synth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr float kFlatBackground = -0.6f;
constexpr double kNoiseBackgroundLo = -1.0, kNoiseBackgroundHi = -0.2;
constexpr double kTextureLo = 0.1, kTextureHi = 1.0;

ShapeKind object_shape(const MotionSpec& spec, std::size_t k) {
  if (spec.shape != ShapeKind::two_objects) return spec.shape;
  return k == 0 ? ShapeKind::square : ShapeKind::disk;
}

bool covers(ShapeKind shape, double size, double ox, double oy, std::size_t x, std::size_t y) {
  if (shape == ShapeKind::disk) {
    const double r = size / 2.0;
    const double dx = double(x) + 0.5 - (ox + r), dy = double(y) + 0.5 - (oy + r);
    return dx * dx + dy * dy <= r * r;
  }
  return double(x) >= ox && double(x) < ox + size && double(y) >= oy && double(y) < oy + size;
}

}  // namespace

std::string_view shape_name(ShapeKind s) noexcept {
  switch (s) {
    case ShapeKind::square: return "square";
    case ShapeKind::disk: return "disk";
    case ShapeKind::two_objects: return "two_objects";
  }
  return "?";
}

std::string_view background_name(Background b) noexcept { return b == Background::flat ? "flat" : "noise"; }

std::size_t condition_id(ShapeKind shape, Background background) noexcept {
  return 1 + 2 * static_cast<std::size_t>(shape) + static_cast<std::size_t>(background);
}

ShapeKind condition_shape(std::size_t cond) {
  if (cond < 1 || cond > kConditionCount) throw ConfigError("condition id " + std::to_string(cond) + " outside [1, 6]");
  return static_cast<ShapeKind>((cond - 1) / 2);
}

Background condition_background(std::size_t cond) {
  if (cond < 1 || cond > kConditionCount) throw ConfigError("condition id " + std::to_string(cond) + " outside [1, 6]");
  return static_cast<Background>((cond - 1) % 2);
}

json spec_to_json(const MotionSpec& spec) {
  json objects = json::array();
  for (const auto& o : spec.objects) objects.push_back({{"x0", o.x0}, {"y0", o.y0}, {"vx", o.vx}, {"vy", o.vy}});
  return {{"shape", shape_name(spec.shape)},
          {"size", spec.size},
          {"objects", objects},
          {"texture_seed", spec.texture_seed},
          {"background", background_name(spec.background)},
          {"pixel_noise", spec.pixel_noise}};
}

MotionSpec spec_from_json(const json& j) {
  MotionSpec s;
  try {
    const auto shape = j.at("shape").get<std::string>();
    if (shape == "square") s.shape = ShapeKind::square;
    else if (shape == "disk") s.shape = ShapeKind::disk;
    else if (shape == "two_objects") s.shape = ShapeKind::two_objects;
    else throw FormatError("unknown shape kind '" + shape + "'");
    const auto bg = j.at("background").get<std::string>();
    if (bg == "flat") s.background = Background::flat;
    else if (bg == "noise") s.background = Background::noise;
    else throw FormatError("unknown background kind '" + bg + "'");
    s.size = j.at("size").get<std::size_t>();
    s.texture_seed = j.at("texture_seed").get<std::uint64_t>();
    s.pixel_noise = j.at("pixel_noise").get<double>();
    for (const auto& o : j.at("objects"))
      s.objects.push_back({o.at("x0").get<double>(), o.at("y0").get<double>(), o.at("vx").get<double>(),
                           o.at("vy").get<double>()});
  } catch (const json::exception& e) {
    throw FormatError(std::string("motion spec: ") + e.what());
  }
  return s;
}

void validate_spec(const MotionSpec& spec, const ModelConfig& cfg) {
  const std::size_t want = spec.shape == ShapeKind::two_objects ? 2 : 1;
  if (spec.objects.size() != want)
    throw ConfigError("motion spec: " + std::string(shape_name(spec.shape)) + " needs " + std::to_string(want) +
                      " object(s), got " + std::to_string(spec.objects.size()));
  if (spec.size < 1 || spec.size > std::min(cfg.height, cfg.width))
    throw ConfigError("motion spec: object size " + std::to_string(spec.size) + " does not fit the frame");
  if (spec.pixel_noise < 0.0) throw ConfigError("motion spec: pixel noise must be non-negative");
  const double s = double(spec.size);
  for (std::size_t k = 0; k < spec.objects.size(); ++k) {
    const auto& o = spec.objects[k];
    for (std::size_t f = 0; f < cfg.frames; ++f) {
      const double ox = o.x0 + o.vx * double(f), oy = o.y0 + o.vy * double(f);
      if (ox < 0.0 || oy < 0.0 || ox + s > double(cfg.width) || oy + s > double(cfg.height))
        throw ConfigError("motion spec: object " + std::to_string(k) + " leaves the frame at frame " +
                          std::to_string(f));
    }
  }
  if (spec.objects.size() == 2) {
    const auto &a = spec.objects[0], &b = spec.objects[1];
    for (std::size_t f = 0; f < cfg.frames; ++f) {
      const double ax = a.x0 + a.vx * double(f), ay = a.y0 + a.vy * double(f);
      const double bx = b.x0 + b.vx * double(f), by = b.y0 + b.vy * double(f);
      if (ax < bx + s && bx < ax + s && ay < by + s && by < ay + s)
        throw ConfigError("motion spec: objects overlap at frame " + std::to_string(f));
    }
  }
}

std::size_t FlowField::valid_count(std::size_t i) const {
  std::size_t n = 0;
  for (std::size_t p = 0; p < grid.size(); ++p) n += valid(i, p);
  return n;
}

amf::MotionFlow FlowField::as_flow() const {
  auto flow = amf::MotionFlow::zeros(amf::FlowMode::hard, frames, grid);
  flow.delta = delta;
  flow.source = "ground_truth";
  return flow;
}

std::pair<VideoClip, FlowField> gen_clip(const MotionSpec& spec, const ModelConfig& cfg) {
  cfg.validate();
  validate_spec(spec, cfg);
  const std::size_t f = cfg.frames, c = cfg.channels, h = cfg.height, w = cfg.width, s = spec.size;
  const std::size_t nobj = spec.objects.size();

  std::vector<std::vector<float>> textures(nobj);
  for (std::size_t k = 0; k < nobj; ++k) {
    Rng rng(derive_seed(spec.texture_seed, k + 1));
    textures[k].resize(c * s * s);
    for (auto& t : textures[k]) t = static_cast<float>(rng.uniform(kTextureLo, kTextureHi));
  }
  std::vector<float> background(c * h * w, kFlatBackground);
  if (spec.background == Background::noise) {
    Rng rng(derive_seed(spec.texture_seed, "background"));
    for (auto& b : background) b = static_cast<float>(rng.uniform(kNoiseBackgroundLo, kNoiseBackgroundHi));
  }

  VideoClip clip{Tensor<float>({f, c, h, w}), spec, condition_id(spec.shape, spec.background)};
  Rng noise_rng(derive_seed(spec.texture_seed, "pixel_noise"));
  for (std::size_t fi = 0; fi < f; ++fi) {
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          float value = background[(ch * h + y) * w + x];
          for (std::size_t k = 0; k < nobj; ++k) {
            const auto& o = spec.objects[k];
            const double ox = o.x0 + o.vx * double(fi), oy = o.y0 + o.vy * double(fi);
            if (!covers(object_shape(spec, k), double(s), ox, oy, x, y)) continue;
            const auto lx = std::min<std::size_t>(s - 1, static_cast<std::size_t>(std::floor(double(x) - ox)));
            const auto ly = std::min<std::size_t>(s - 1, static_cast<std::size_t>(std::floor(double(y) - oy)));
            value = textures[k][(ch * s + ly) * s + lx];
          }
          clip.pixels[((fi * c + ch) * h + y) * w + x] = value;
        }
    if (spec.pixel_noise > 0.0)
      for (std::size_t e = fi * c * h * w; e < (fi + 1) * c * h * w; ++e)
        clip.pixels[e] = std::clamp(clip.pixels[e] + static_cast<float>(spec.pixel_noise * noise_rng.normal()), -1.0f, 1.0f);
  }

  const std::size_t p = cfg.patch;
  FlowField flow{f, amf::grid_of(cfg), Tensor<double>({f, f, cfg.tokens_per_frame(), 2}),
                 std::vector<std::uint8_t>(f * cfg.tokens_per_frame(), 0), true};
  for (const auto& o : spec.objects)
    if (std::fmod(o.vx, double(p)) != 0.0 || std::fmod(o.vy, double(p)) != 0.0) flow.exact = false;
  const auto& grid = flow.grid;
  for (std::size_t i = 0; i < f; ++i)
    for (std::size_t cell = 0; cell < grid.size(); ++cell) {
      for (std::size_t k = 0; k < nobj; ++k) {
        const auto& o = spec.objects[k];
        const double ox = o.x0 + o.vx * double(i), oy = o.y0 + o.vy * double(i);
        bool full = true;
        for (std::size_t dy = 0; dy < p && full; ++dy)
          for (std::size_t dx = 0; dx < p && full; ++dx)
            full = covers(object_shape(spec, k), double(s), ox, oy, grid.u(cell) * p + dx, grid.v(cell) * p + dy);
        if (!full) continue;
        flow.mask[i * grid.size() + cell] = 1;
        for (std::size_t j = 0; j < f; ++j) {
          const double lag = double(j) - double(i);
          const std::size_t off = ((i * f + j) * grid.size() + cell) * 2;
          flow.delta[off] = std::round(lag * o.vx / double(p));
          flow.delta[off + 1] = std::round(lag * o.vy / double(p));
        }
      }
    }
  return {std::move(clip), std::move(flow)};
}

MotionSpec random_spec(std::size_t cond, std::uint64_t seed, const ModelConfig& cfg, const SpecOptions& opts) {
  Rng rng(seed);
  MotionSpec spec;
  spec.shape = condition_shape(cond);
  spec.background = condition_background(cond);
  spec.texture_seed = derive_seed(seed, "texture");
  spec.pixel_noise = opts.pixel_noise;
  const bool two = spec.shape == ShapeKind::two_objects;
  const std::size_t band = two ? cfg.height / 2 : cfg.height;
  const std::size_t max_size = std::min({opts.max_size, band, cfg.width});
  const std::size_t min_size = std::min(opts.min_size, max_size);
  const auto span = double(cfg.frames - 1);
  const int step = opts.cell_multiple ? static_cast<int>(cfg.patch) : 1;
  const int max_units = opts.max_speed / step;
  if (opts.cell_multiple && max_units < 1)
    throw ConfigError("random spec: max speed " + std::to_string(opts.max_speed) + " below one patch per frame");

  for (int attempt = 0; attempt < 1000; ++attempt) {
    spec.size = static_cast<std::size_t>(rng.uniform_int(std::int64_t(min_size), std::int64_t(max_size)));
    const double s = double(spec.size);
    spec.objects.clear();
    bool ok = true;
    for (std::size_t k = 0; k < (two ? 2u : 1u) && ok; ++k) {
      ObjectMotion o;
      o.vx = double(step * rng.uniform_int(-max_units, max_units));
      o.vy = double(step * rng.uniform_int(-max_units, max_units));
      if (opts.cell_multiple && o.vx == 0.0 && o.vy == 0.0) ok = false;
      const double y_lo = two ? double(k * band) : 0.0;
      const double y_hi = y_lo + double(band) - s;  // inclusive bound on the top edge
      const double x_min = std::max(0.0, -o.vx * span), x_max = double(cfg.width) - s - std::max(0.0, o.vx * span);
      const double y_min = y_lo + std::max(0.0, -o.vy * span), y_max = y_hi - std::max(0.0, o.vy * span);
      if (x_min > x_max || y_min > y_max) {
        ok = false;
        break;
      }
      o.x0 = double(rng.uniform_int(std::int64_t(x_min), std::int64_t(x_max)));
      o.y0 = double(rng.uniform_int(std::int64_t(y_min), std::int64_t(y_max)));
      spec.objects.push_back(o);
    }
    if (ok) {
      validate_spec(spec, cfg);
      return spec;
    }
  }
  throw ConfigError("random spec: no in-bounds trajectory found for condition " + std::to_string(cond));
}

Dataset gen_dataset(std::size_t count, std::uint64_t seed, const ModelConfig& cfg, const SpecOptions& opts) {
  if (count < 1) throw ConfigError("dataset: count must be >= 1");
  if (opts.conditions.empty()) throw ConfigError("dataset: no condition ids");
  Dataset ds{cfg, seed, {}};
  ds.clips.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t cond = opts.conditions[k % opts.conditions.size()];
    ds.clips.push_back(gen_clip(random_spec(cond, derive_seed(seed, k), cfg, opts), cfg).first);
  }
  return ds;
}

namespace {

std::string clip_file(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "clips/clip_%05zu.vtns", k);
  return buf;
}

}  // namespace

json dataset_manifest(const Dataset& ds) {
  json clips = json::array();
  for (std::size_t k = 0; k < ds.clips.size(); ++k)
    clips.push_back({{"file", clip_file(k)}, {"cond", ds.clips[k].cond}, {"spec", spec_to_json(ds.clips[k].spec)}});
  return {{"format", "ditflow-dataset/1"},
          {"geometry", config_to_json(ds.geometry)},
          {"seed", ds.seed},
          {"count", ds.clips.size()},
          {"clips", clips}};
}

void save_dataset(const fs::path& dir, const Dataset& ds) {
  fs::create_directories(dir / "clips");
  for (std::size_t k = 0; k < ds.clips.size(); ++k) vtns::save(dir / clip_file(k), ds.clips[k].pixels);
  vtns::write_file(dir / "manifest.json", dataset_manifest(ds).dump(2) + "\n");
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw FormatError("dataset manifest not found: " + mpath.string());
  json m;
  try {
    m = json::parse(vtns::read_file(mpath));
  } catch (const json::exception& e) {
    throw FormatError("dataset manifest " + mpath.string() + ": " + e.what());
  }
  if (m.value("format", "") != "ditflow-dataset/1") throw FormatError("dataset manifest " + mpath.string() + ": unsupported format");
  Dataset ds;
  ds.geometry = config_from_json(m.at("geometry"));
  ds.seed = m.at("seed").get<std::uint64_t>();
  for (const auto& entry : m.at("clips")) {
    const fs::path file = dir / entry.at("file").get<std::string>();
    if (!fs::exists(file)) throw FormatError("dataset clip not found: " + file.string());
    VideoClip clip{vtns::load<float>(file), spec_from_json(entry.at("spec")), entry.at("cond").get<std::size_t>()};
    if (clip.pixels.dims() != ds.geometry.latent_shape())
      throw FormatError("dataset clip " + file.string() + " has dims " + to_string(clip.pixels.dims()));
    ds.clips.push_back(std::move(clip));
  }
  if (ds.clips.size() != m.at("count").get<std::size_t>()) throw FormatError("dataset manifest count disagrees with clip list");
  return ds;
}

// ---- training -----------------------------------------------------------------

double holdout_mse(const DiTModel<float>& model, const std::vector<VideoClip>& clips, std::uint64_t seed) {
  if (clips.empty()) return std::numeric_limits<double>::quiet_NaN();
  const auto& sch = model.schedule();
  double total = 0.0;
  for (std::size_t k = 0; k < clips.size(); ++k) {
    Rng rng(derive_seed(seed, k));
    const auto t = static_cast<std::size_t>(rng.uniform_int(0, std::int64_t(sch.steps())));
    auto noise = rng.normal_tensor<float>(clips[k].pixels.dims());
    auto eps = model.predict_noise(sch.add_noise(clips[k].pixels, t, noise), t, clips[k].cond);
    double acc = 0.0;
    for (std::size_t e = 0; e < eps.size(); ++e) {
      const double d = double(eps[e]) - double(noise[e]);
      acc += d * d;
    }
    total += acc / double(eps.size());
  }
  return total / double(clips.size());
}

TrainResult train_toy_dit(const Dataset& data, const ModelConfig& cfg, const TrainOptions& opts,
                          const ProgressFn& progress) {
  if (data.clips.empty()) throw ConfigError("training: dataset is empty");
  if (opts.batch_size < 1) throw ConfigError("training: batch size must be >= 1");
  if (!(opts.lr > 0.0)) throw ConfigError("training: learning rate must be positive");
  for (const auto& clip : data.clips)
    if (clip.pixels.dims() != cfg.latent_shape())
      throw ShapeError("training: clip dims " + to_string(clip.pixels.dims()) + " do not match model " +
                       to_string(cfg.latent_shape()));

  DiTModel<float> model(cfg, derive_seed(opts.seed, "init"));
  const auto holdout = gen_dataset(std::max<std::size_t>(opts.holdout_clips, 1), derive_seed(opts.seed, "holdout"), cfg).clips;
  const std::uint64_t holdout_seed = derive_seed(opts.seed, "holdout-noise");

  TrainResult result{model, {}, 0.0};
  result.untrained_holdout_mse = holdout_mse(model, holdout, holdout_seed);
  result.curve.push_back({0, std::numeric_limits<double>::quiet_NaN(), result.untrained_holdout_mse});

  auto& params = model.parameters();
  std::vector<AdamState<float>> adam;
  for (const auto& p : params) adam.emplace_back(p.size());
  std::vector<std::vector<double>> grads(params.size());
  const auto& sch = model.schedule();
  DiTModel<float> last_good = model;

  std::vector<std::size_t> order(data.clips.size());
  for (std::size_t epoch = 1; epoch <= opts.epochs; ++epoch) {
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    Rng shuffle(derive_seed(derive_seed(opts.seed, "shuffle"), epoch));
    for (std::size_t k = order.size(); k > 1; --k)
      std::swap(order[k - 1], order[static_cast<std::size_t>(shuffle.uniform_int(0, std::int64_t(k) - 1))]);

    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      for (std::size_t pi = 0; pi < params.size(); ++pi) grads[pi].assign(params[pi].size(), 0.0);
      double batch_loss = 0.0;
      try {
        for (std::size_t b = start; b < end; ++b) {
          const auto& clip = data.clips[order[b]];
          Rng rng(derive_seed(derive_seed(opts.seed, epoch), b));
          const auto t = static_cast<std::size_t>(rng.uniform_int(0, std::int64_t(sch.steps())));
          const std::size_t cond = rng.uniform() < opts.cond_dropout ? 0 : clip.cond;
          auto noise = rng.normal_tensor<float>(clip.pixels.dims());
          ag::Tape<float> tape;
          auto w = model.bind(tape, true);
          ForwardArgs<float> args;
          args.latent = tape.constant(sch.add_noise(clip.pixels, t, noise));
          args.step = t;
          args.cond = cond;
          auto eps = model.forward(tape, w, args).eps;
          auto loss = ag::scale(ag::sum_squares(ag::sub(eps, tape.constant(noise))), 1.0f / float(noise.size()));
          tape.backward(loss);
          batch_loss += double(loss.value().item());
          for (std::size_t pi = 0; pi < params.size(); ++pi) {
            auto g = tape.value(w[pi].id()).grad();
            for (std::size_t e = 0; e < g.size(); ++e) grads[pi][e] += double(g[e]);
          }
        }
      } catch (const NonFiniteError& e) {
        throw TrainingDiverged(std::string("training diverged in epoch ") + std::to_string(epoch) + ": " + e.what(),
                               last_good, epoch);
      }
      const double inv = 1.0 / double(end - start);
      batch_loss *= inv;
      if (!std::isfinite(batch_loss))
        throw TrainingDiverged("training diverged in epoch " + std::to_string(epoch) + ": loss is not finite",
                               last_good, epoch);
      double norm2 = 0.0;
      for (auto& g : grads)
        for (auto& x : g) {
          x *= inv;
          norm2 += x * x;
        }
      const double clip_scale =
          (opts.grad_clip > 0.0 && std::sqrt(norm2) > opts.grad_clip) ? opts.grad_clip / std::sqrt(norm2) : 1.0;
      for (std::size_t pi = 0; pi < params.size(); ++pi) {
        std::vector<float> g(grads[pi].size());
        for (std::size_t e = 0; e < g.size(); ++e) g[e] = static_cast<float>(grads[pi][e] * clip_scale);
        adam[pi].update(params[pi].values(), g, opts.lr);
      }
      epoch_loss += batch_loss;
      ++batches;
      if (progress && opts.log_every > 0 && batches % opts.log_every == 0) progress(epoch, batches, batch_loss);
    }
    for (const auto& p : params)
      if (!p.all_finite())
        throw TrainingDiverged("training diverged in epoch " + std::to_string(epoch) + ": non-finite weights",
                               last_good, epoch);
    last_good = model;
    result.curve.push_back({epoch, epoch_loss / double(batches), holdout_mse(model, holdout, holdout_seed)});
    if (progress) progress(epoch, 0, result.curve.back().holdout_mse);
  }
  result.model = std::move(model);
  return result;
}

std::string curve_csv(const std::vector<CurvePoint>& curve) {
  std::string out = "epoch,train_mse,holdout_mse\n";
  char buf[96];
  for (const auto& c : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", c.epoch, c.train_mse, c.holdout_mse);
    out += buf;
  }
  return out;
}

}  // namespace ditflow::synth
