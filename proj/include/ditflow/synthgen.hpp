#pragma once

// Synthetic clips with known patch motion, and the toy-model trainer.
//
// A clip shows one or two textured objects translating at constant velocity
// over a flat or statically textured background. Object texture is attached
// to object-local coordinates, so whole-pixel motion is rigid and the
// patch-level ground truth between frames i and j is round((j - i) v / P).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ditflow/amf.hpp"
#include "ditflow/model.hpp"

namespace ditflow::synth {

enum class ShapeKind { square = 0, disk = 1, two_objects = 2 };
enum class Background { flat = 0, noise = 1 };

std::string_view shape_name(ShapeKind s) noexcept;
std::string_view background_name(Background b) noexcept;

/// Condition id encoding shape kind and background: 1 + 2 * shape + background.
/// Id 0 is reserved for the empty condition.
inline constexpr std::size_t kConditionCount = 6;
std::size_t condition_id(ShapeKind shape, Background background) noexcept;
ShapeKind condition_shape(std::size_t cond);
Background condition_background(std::size_t cond);

struct ObjectMotion {
  double x0 = 0;  // top-left corner in pixels at frame 0
  double y0 = 0;
  double vx = 0;  // pixels per frame
  double vy = 0;

  bool operator==(const ObjectMotion&) const = default;
};

struct MotionSpec {
  ShapeKind shape = ShapeKind::square;
  std::size_t size = 6;              // object side (square) or diameter (disk), pixels
  std::vector<ObjectMotion> objects;  // one object, or two for two_objects
  std::uint64_t texture_seed = 0;
  Background background = Background::flat;
  double pixel_noise = 0.0;  // stddev of independent per-frame pixel noise

  bool operator==(const MotionSpec&) const = default;
};

nlohmann::json spec_to_json(const MotionSpec& spec);
MotionSpec spec_from_json(const nlohmann::json& j);

struct VideoClip {
  Tensor<float> pixels;  // [F, C, H, W], values in [-1, 1]
  MotionSpec spec;
  std::size_t cond = 0;
};

/// Ground-truth patch flow. Patches fully covered by an object in frame i are
/// valid; their displacement toward frame j is round((j - i) v / P).
struct FlowField {
  std::size_t frames = 0;
  amf::PatchGrid grid;
  Tensor<double> delta;            // [F, F, S, 2]
  std::vector<std::uint8_t> mask;  // [F * S]
  /// True when every object moves by whole patch cells per frame.
  bool exact = false;

  bool valid(std::size_t i, std::size_t p) const { return mask.at(i * grid.size() + p) != 0; }
  std::size_t valid_count(std::size_t i) const;
  amf::MotionFlow as_flow() const;
};

/// Renders a clip. Throws ConfigError when an object leaves the frame or the
/// spec is inconsistent with its shape kind.
std::pair<VideoClip, FlowField> gen_clip(const MotionSpec& spec, const ModelConfig& cfg);

/// Checks a spec against a config without rendering; throws ConfigError.
void validate_spec(const MotionSpec& spec, const ModelConfig& cfg);

struct SpecOptions {
  std::vector<std::size_t> conditions = {1, 2, 3, 4, 5, 6};
  int max_speed = 3;  // velocities drawn from {-max_speed .. max_speed}
  /// Velocities restricted to whole patch multiples, not all zero.
  bool cell_multiple = false;
  double pixel_noise = 0.0;
  std::size_t min_size = 4;
  std::size_t max_size = 7;
};

/// Random in-bounds spec for a condition id.
MotionSpec random_spec(std::size_t cond, std::uint64_t seed, const ModelConfig& cfg, const SpecOptions& opts = {});

struct Dataset {
  ModelConfig geometry;
  std::uint64_t seed = 0;
  std::vector<VideoClip> clips;
};

/// `count` clips balanced over opts.conditions (round robin).
Dataset gen_dataset(std::size_t count, std::uint64_t seed, const ModelConfig& cfg, const SpecOptions& opts = {});

/// Directory with manifest.json and clips/clip_NNNNN.vtns.
void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir);
nlohmann::json dataset_manifest(const Dataset& ds);

struct TrainOptions {
  std::size_t epochs = 8;
  double lr = 1e-3;
  std::size_t batch_size = 16;
  double cond_dropout = 0.2;  // fraction of samples trained with the empty condition
  double grad_clip = 1.0;     // global gradient-norm clip, 0 disables
  std::size_t holdout_clips = 64;
  std::uint64_t seed = 0;
  std::size_t log_every = 0;  // batches between progress callbacks, 0 disables
};

struct CurvePoint {
  std::size_t epoch = 0;
  double train_mse = 0;    // mean over the epoch's batches (epoch 0: none, NaN)
  double holdout_mse = 0;  // fixed noise draws on held-out clips
};

struct TrainResult {
  DiTModel<float> model;
  std::vector<CurvePoint> curve;
  double untrained_holdout_mse = 0;
};

/// Raised when a loss turns non-finite; carries the model from the last
/// completed epoch.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, DiTModel<float> last_good, std::size_t epoch)
      : std::runtime_error(what), last_good_(std::move(last_good)), epoch_(epoch) {}
  const DiTModel<float>& last_good() const noexcept { return last_good_; }
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  DiTModel<float> last_good_;
  std::size_t epoch_;
};

/// Called every log_every batches with the batch loss, and after each epoch
/// with batch = 0 and the holdout MSE.
using ProgressFn = std::function<void(std::size_t epoch, std::size_t batch, double loss)>;

/// Mean-squared noise prediction error over held-out clips with noise and
/// steps drawn from `seed`.
double holdout_mse(const DiTModel<float>& model, const std::vector<VideoClip>& clips, std::uint64_t seed);

/// Epsilon-prediction training from a random initialization. Held-out clips
/// are generated from a seed derived from opts.seed.
TrainResult train_toy_dit(const Dataset& data, const ModelConfig& cfg, const TrainOptions& opts,
                          const ProgressFn& progress = {});

std::string curve_csv(const std::vector<CurvePoint>& curve);

}  // namespace ditflow::synth
