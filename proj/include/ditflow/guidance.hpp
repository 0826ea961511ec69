#pragma once

// Guided denoising against a reference motion flow.
//
// During the first guided steps of sampling (the highest t values), the soft
// motion flow of the current latent is pulled toward the reference hard flow
// by a few Adam steps on either the latent itself or an additive delta on the
// positional embedding. Keys and values of one block can be replaced by those
// of the reference clip at every step.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ditflow/adam.hpp"
#include "ditflow/amf.hpp"
#include "ditflow/model.hpp"

namespace ditflow::guidance {

enum class TargetMode { latent, posemb };

std::string_view target_name(TargetMode mode) noexcept;
/// Throws ConfigError on an unknown name.
TargetMode parse_target(std::string_view name);

struct GuidanceConfig {
  std::size_t block = 2;
  double tau = 2.0;
  std::size_t k_opt = 5;
  double t_opt_fraction = 0.2;
  double lr_start = 0.002;
  double lr_end = 0.001;
  TargetMode target = TargetMode::latent;
  bool inject_kv = true;
  std::size_t injection_block = 0;
  std::uint64_t seed = 0;

  /// Defaults for a model: guidance block at mid depth.
  static GuidanceConfig defaults_for(const ModelConfig& model);

  /// Throws ConfigError on any violated invariant.
  void validate(const ModelConfig& model) const;

  /// Number of guided denoising steps: ceil(fraction * T).
  std::size_t guided_count(std::size_t steps) const;
  /// Guided steps are t > T_opt = T - guided_count.
  bool is_guided(std::size_t t, std::size_t steps) const { return t > steps - guided_count(steps); }
};

nlohmann::json config_to_json(const GuidanceConfig& cfg);
GuidanceConfig config_from_json(const nlohmann::json& j);

/// Linear from lr_start at t = T to lr_end at the last guided step. A window of
/// length one uses lr_start. Throws std::out_of_range outside the window.
double lr_at(std::size_t t, const GuidanceConfig& cfg, std::size_t steps);

/// Per-head keys and values of `block` for the clean reference at t = 0 with
/// the empty condition.
template <typename T>
KVCache<T> capture_reference_kv(const DiTModel<T>& model, const Tensor<T>& z_ref, std::size_t block);

/// L_AMF of the soft flow at the guidance block against the reference, taped.
/// `delta` may be a constant; it is applied on top of the base embedding.
template <typename T>
ag::Var<T> guidance_loss(ag::Tape<T>& tape, const DiTModel<T>& model, const std::vector<ag::Var<T>>& params,
                         ag::Var<T> latent, std::optional<ag::Var<T>> delta, std::size_t t, std::size_t cond,
                         const amf::MotionFlow& ref, const GuidanceConfig& cfg, const KVCache<T>* kv);

/// Where a non-finite loss dumps its state (empty: no dump).
struct DumpTarget {
  std::filesystem::path dir;
};

/// One inner step: loss and gradient w.r.t. the selected target, then one
/// Adam update of it. Returns the loss before the update. On a non-finite
/// loss the state is dumped and NonFiniteError is thrown.
template <typename T>
double optimize_step(const DiTModel<T>& model, Tensor<T>& z_t, Tensor<T>& delta, std::size_t t, std::size_t cond,
                     const amf::MotionFlow& ref, const GuidanceConfig& cfg, AdamState<T>& adam, double lr,
                     const KVCache<T>* kv, const DumpTarget& dump = {});

struct LossRecord {
  std::size_t t = 0;
  std::size_t inner_step = 0;
  double loss = 0;
  double lr = 0;
};

std::string loss_trace_csv(const std::vector<LossRecord>& trace);

/// Positional-embedding deltas recorded after optimization at each guided step.
struct OptimizedEmbeddingSet {
  std::map<std::size_t, Tensor<float>> deltas;
  std::string reference_id;
  std::size_t cond = 0;
  std::uint64_t config_hash = 0;
  nlohmann::json guidance;  // GuidanceConfig of the run that produced it

  void save(const std::filesystem::path& dir) const;
  static OptimizedEmbeddingSet load(const std::filesystem::path& dir);
};

/// Latent-mode state after the last guided step, for continuing the sampler
/// under another condition.
struct LatentReplayState {
  std::size_t t = 0;
  Tensor<float> z;
};

struct GenerationResult {
  Tensor<float> video;  // identity codec: the final latent
  std::vector<LossRecord> trace;
  std::optional<OptimizedEmbeddingSet> embeddings;  // posemb mode
  std::optional<LatentReplayState> replay;          // latent mode
};

/// Initial latent z_T for a seed.
Tensor<float> initial_latent(const ModelConfig& cfg, std::uint64_t seed);

/// Plain DDIM sampling from z_T(seed).
Tensor<float> sample_unguided(const DiTModel<float>& model, std::size_t cond, std::uint64_t seed,
                              const KVCache<float>* kv = nullptr);

/// The full guided sampler. `kv` must be given iff cfg.inject_kv.
GenerationResult ditflow_generate(const DiTModel<float>& model, const amf::MotionFlow& ref, const KVCache<float>* kv,
                                  std::size_t cond, const GuidanceConfig& cfg, const std::string& reference_id = "",
                                  const DumpTarget& dump = {});

/// Samples with stored deltas applied at their steps and no optimization.
/// Throws ConfigError on a geometry mismatch or a missing guided step.
Tensor<float> zero_shot_generate(const DiTModel<float>& model, const OptimizedEmbeddingSet& emb, std::size_t cond,
                                 std::uint64_t seed, const KVCache<float>* kv);

/// Continues a latent-mode state under another condition.
Tensor<float> replay_latent(const DiTModel<float>& model, const LatentReplayState& state, std::size_t cond,
                            const KVCache<float>* kv);

/// Hard flow of a generated video, extracted the same way as a reference
/// (t = 0, empty condition, guidance block).
amf::MotionFlow video_flow(const DiTModel<float>& model, const Tensor<float>& video, const GuidanceConfig& cfg);

}  // namespace ditflow::guidance
