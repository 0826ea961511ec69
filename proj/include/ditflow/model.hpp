#pragma once

// Toy text-free video diffusion transformer.
//
// Latents are F x C x H x W (identity codec: latents are pixels). Tokens are
// P x P patches in frame-major, then raster order; token f*S + v*(W/P) + u
// covers frame f, patch row v, patch column u. Each block is pre-norm
// multi-head self-attention over all F*S tokens followed by a GELU MLP.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ditflow/autograd.hpp"
#include "ditflow/tensor.hpp"

namespace ditflow {

struct ModelConfig {
  std::size_t frames = 4;
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t patch = 2;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t blocks = 4;
  std::size_t steps = 50;
  std::size_t cond_vocab = 6;
  std::size_t mlp_ratio = 4;

  /// Throws ConfigError on any violated invariant.
  void validate() const;

  std::size_t grid_h() const noexcept { return height / patch; }
  std::size_t grid_w() const noexcept { return width / patch; }
  /// Patches per frame (S).
  std::size_t tokens_per_frame() const noexcept { return grid_h() * grid_w(); }
  std::size_t tokens() const noexcept { return frames * tokens_per_frame(); }
  std::size_t head_dim() const noexcept { return dim / heads; }
  std::size_t patch_dim() const noexcept { return channels * patch * patch; }
  Shape latent_shape() const { return {frames, channels, height, width}; }

  /// FNV-1a over the geometry fields; identifies compatible artifacts.
  std::uint64_t geometry_hash() const noexcept;

  bool operator==(const ModelConfig&) const = default;
};

/// Cumulative signal coefficients alpha_bar[0..T] of a truncated cosine
/// schedule: alpha_bar_t = cos^2(theta_max * t / T), alpha_bar_T = 0.02.
class DiffusionSchedule {
 public:
  DiffusionSchedule() = default;
  explicit DiffusionSchedule(std::size_t steps, double final_alpha_bar = 0.02);

  std::size_t steps() const noexcept { return alpha_bar_.size() - 1; }
  double alpha_bar(std::size_t t) const { return alpha_bar_.at(t); }
  const std::vector<double>& alpha_bars() const noexcept { return alpha_bar_; }

  /// sqrt(ab_t) z0 + sqrt(1 - ab_t) noise
  template <typename T>
  Tensor<T> add_noise(const Tensor<T>& z0, std::size_t t, const Tensor<T>& noise) const;

  /// Deterministic DDIM update z_t -> z_{t-1} from a noise prediction.
  template <typename T>
  Tensor<T> ddim_step(const Tensor<T>& zt, const Tensor<T>& eps, std::size_t t) const;

 private:
  std::vector<double> alpha_bar_;
};

/// Effective embedding is base + delta; only delta is ever optimized.
template <typename T>
struct PositionalEmbedding {
  Tensor<T> base;   // [F*S, D]
  Tensor<T> delta;  // [F*S, D]

  Tensor<T> effective() const;
};

/// Fixed 3D sinusoidal table: D/2 columns encode the frame index, D/4 the
/// patch row, D/4 the patch column. Requires D % 4 == 0.
template <typename T>
PositionalEmbedding<T> build_posemb(const ModelConfig& cfg);

/// Sin/cos interleave of one position over `width` columns.
void sinusoid_into(double position, std::size_t width, double* out);

/// [F, C, H, W] -> [F*S, C*P*P]: frame-major, then patch row, then patch
/// column; each row holds channel-major P x P pixels in raster order.
template <typename T>
ag::Var<T> patchify(ag::Var<T> latent, std::size_t patch);

/// Inverse of patchify for a latent of the given dims.
template <typename T>
ag::Var<T> unpatchify(ag::Var<T> tokens, const Shape& latent_dims, std::size_t patch);

/// Head-averaged projections of one block, each [F, S, D_h].
template <typename T>
struct AttentionCapture {
  std::size_t block = 0;
  Tensor<T> q;
  Tensor<T> k;
  Tensor<T> v;

  Tensor<T> frame_q(std::size_t i) const;
  Tensor<T> frame_k(std::size_t j) const;
};

/// Per-head keys/values of one block, [F*S, M, D_h].
template <typename T>
struct KVCache {
  std::size_t block = 0;
  Tensor<T> keys;
  Tensor<T> values;
};

/// Capture outputs recorded on the tape.
template <typename T>
struct CaptureVars {
  std::size_t block = 0;
  ag::Var<T> q_mean;   // [F*S, D_h]
  ag::Var<T> k_mean;   // [F*S, D_h]
  ag::Var<T> v_mean;   // [F*S, D_h]
  ag::Var<T> q_heads;  // [F*S, M, D_h]
  ag::Var<T> k_heads;
  ag::Var<T> v_heads;
};

template <typename T>
struct ForwardArgs {
  ag::Var<T> latent;
  std::size_t step = 0;
  std::size_t cond = 0;
  std::optional<ag::Var<T>> posemb_delta;
  std::optional<std::size_t> capture_block;
  const KVCache<T>* inject = nullptr;
};

template <typename T>
struct ForwardResult {
  ag::Var<T> eps;
  std::optional<CaptureVars<T>> capture;
};

template <typename T>
class DiTModel {
 public:
  /// Randomly initialized weights.
  DiTModel(ModelConfig cfg, std::uint64_t seed);
  /// Weights supplied by name, in parameter_names() order.
  DiTModel(ModelConfig cfg, std::vector<Tensor<T>> params);

  const ModelConfig& config() const noexcept { return cfg_; }
  const DiffusionSchedule& schedule() const noexcept { return schedule_; }
  const PositionalEmbedding<T>& posemb() const noexcept { return posemb_; }

  std::vector<std::string> parameter_names() const;
  std::vector<Tensor<T>>& parameters() noexcept { return params_; }
  const std::vector<Tensor<T>>& parameters() const noexcept { return params_; }
  Tensor<T>& parameter(const std::string& name);
  const Tensor<T>& parameter(const std::string& name) const;

  template <typename U>
  DiTModel<U> cast() const {
    std::vector<Tensor<U>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.template cast<U>());
    return DiTModel<U>(cfg_, std::move(out));
  }

  /// Records every parameter on the tape (as leaves or constants).
  std::vector<ag::Var<T>> bind(ag::Tape<T>& tape, bool requires_grad) const;

  ForwardResult<T> forward(ag::Tape<T>& tape, const std::vector<ag::Var<T>>& params, const ForwardArgs<T>& args) const;

  /// Tokenize a latent var into [F*S, C*P*P] rows (pre-projection).
  ag::Var<T> patchify(ag::Var<T> latent) const;
  ag::Var<T> unpatchify(ag::Var<T> tokens) const;

  /// Untaped convenience wrappers.
  Tensor<T> predict_noise(const Tensor<T>& z, std::size_t step, std::size_t cond, const Tensor<T>* delta = nullptr,
                          const KVCache<T>* inject = nullptr) const;
  AttentionCapture<T> capture(const Tensor<T>& z, std::size_t step, std::size_t cond, std::size_t block,
                              const Tensor<T>* delta = nullptr, const KVCache<T>* inject = nullptr) const;

  /// FNV-1a over all weight bytes.
  std::uint64_t weights_checksum() const noexcept;

 private:
  static constexpr std::size_t kGlobalParams = 8;
  static constexpr std::size_t kBlockParams = 13;
  std::size_t block_param(std::size_t block, std::size_t j) const { return kGlobalParams + block * kBlockParams + j; }

  ModelConfig cfg_;
  DiffusionSchedule schedule_;
  PositionalEmbedding<T> posemb_;
  std::vector<Tensor<T>> params_;
};

extern template class DiTModel<float>;
extern template class DiTModel<double>;

}  // namespace ditflow
