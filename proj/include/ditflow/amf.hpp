#pragma once

// Attention motion flow.
//
// Cross-frame attention between the head-averaged queries of frame i and keys
// of frame j is turned into a per-patch displacement map: hard (argmax target
// patch) for the reference, soft (attention-weighted expected target) during
// guidance. A MotionFlow holds the maps of all F x F frame pairs, i == j
// included, as one [F, F, S, 2] table of (du, dv) in patch cells, where u is
// the patch column and v the patch row.

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "ditflow/autograd.hpp"
#include "ditflow/model.hpp"
#include "ditflow/tensor.hpp"

namespace ditflow::amf {

enum class FlowMode { hard, soft };

std::string_view mode_name(FlowMode mode) noexcept;
/// Throws FormatError on an unknown name.
FlowMode parse_mode(std::string_view name);

struct PatchGrid {
  std::size_t rows = 0;  // H / P
  std::size_t cols = 0;  // W / P

  std::size_t size() const noexcept { return rows * cols; }
  std::size_t u(std::size_t p) const noexcept { return p % cols; }
  std::size_t v(std::size_t p) const noexcept { return p / cols; }
  std::size_t index(std::size_t u, std::size_t v) const noexcept { return v * cols + u; }
  bool operator==(const PatchGrid&) const = default;
};

inline PatchGrid grid_of(const ModelConfig& cfg) { return {cfg.grid_h(), cfg.grid_w()}; }

/// [S, 2] table of (u, v) per patch index.
template <typename T>
Tensor<T> coordinate_table(const PatchGrid& grid);

template <typename T>
struct CrossFrameAttention {
  std::size_t i = 0;
  std::size_t j = 0;
  double tau = 1.0;
  Tensor<T> a;  // [S, S], rows: patches of frame i, columns: patches of frame j
};

/// softmax(tau * Q_i K_j^T / sqrt(d_k)) row-wise, d_k = columns of Q_i.
template <typename T>
CrossFrameAttention<T> cross_frame_attention(const Tensor<T>& q_i, const Tensor<T>& k_j, double tau,
                                             std::size_t i = 0, std::size_t j = 0);

/// Taped variant of the same computation.
template <typename T>
ag::Var<T> cross_frame_attention(ag::Var<T> q_i, ag::Var<T> k_j, T tau);

struct DisplacementMap {
  std::size_t i = 0;
  std::size_t j = 0;
  FlowMode mode = FlowMode::hard;
  Tensor<double> delta;  // [S, 2] of (du, dv)
};

/// Offset to the most attended patch; ties go to the lowest index.
template <typename T>
DisplacementMap hard_displacement(const CrossFrameAttention<T>& attn, const PatchGrid& grid);

/// Expected target coordinate under the attention row minus the source.
template <typename T>
DisplacementMap soft_displacement(const CrossFrameAttention<T>& attn, const PatchGrid& grid);

/// Taped soft displacement of an [S, S] attention matrix, giving [S, 2].
template <typename T>
ag::Var<T> soft_displacement(ag::Var<T> attention, const PatchGrid& grid);

struct MotionFlow {
  FlowMode mode = FlowMode::hard;
  std::size_t frames = 0;
  PatchGrid grid;
  Tensor<double> delta;  // [F, F, S, 2]
  double tau = 0.0;
  std::optional<std::size_t> block;  // capture block, absent for non-attention flows
  std::string source = "attention";

  static MotionFlow zeros(FlowMode mode, std::size_t frames, const PatchGrid& grid);

  std::size_t offset(std::size_t i, std::size_t j, std::size_t p) const noexcept {
    return ((i * frames + j) * grid.size() + p) * 2;
  }
  double du(std::size_t i, std::size_t j, std::size_t p) const { return delta[offset(i, j, p)]; }
  double dv(std::size_t i, std::size_t j, std::size_t p) const { return delta[offset(i, j, p) + 1]; }

  DisplacementMap pair(std::size_t i, std::size_t j) const;
  void set_pair(const DisplacementMap& map);
  std::size_t pair_count() const noexcept { return frames * frames; }
  bool same_geometry(const MotionFlow& other) const noexcept {
    return frames == other.frames && grid == other.grid;
  }
};

/// Per-pair route: F^2 cross-frame attentions of a capture.
template <typename T>
MotionFlow hard_amf(const AttentionCapture<T>& cap, const PatchGrid& grid, double tau);
template <typename T>
MotionFlow soft_amf(const AttentionCapture<T>& cap, const PatchGrid& grid, double tau);

/// Batched taped soft flow from head-averaged q, k of shape [F*S, D_h].
/// Returns [F, F, S, 2] in MotionFlow layout.
template <typename T>
ag::Var<T> soft_amf(ag::Var<T> q, ag::Var<T> k, std::size_t frames, const PatchGrid& grid, T tau);

/// Sum over all F^2 * S * 2 entries of squared differences.
/// Throws ShapeError when the geometries differ.
double amf_loss(const MotionFlow& ref, const MotionFlow& cur);

/// Taped loss of a [F, F, S, 2] flow against a fixed reference.
template <typename T>
ag::Var<T> amf_loss(const MotionFlow& ref, ag::Var<T> cur);

/// Same loss assembled pair by pair from per-frame slices of q and k.
template <typename T>
ag::Var<T> amf_loss_pairwise(const MotionFlow& ref, ag::Var<T> q, ag::Var<T> k, T tau);

/// Hard flow of a reference latent: capture at t = 0, empty condition,
/// base positional embedding.
template <typename T>
MotionFlow extract_reference_amf(const DiTModel<T>& model, const Tensor<T>& z_ref, std::size_t block, double tau);

/// Hard flow from raw latent patches: each patch of frame i moves to its
/// Euclidean nearest patch in frame j. Ties prefer zero displacement, then
/// the lowest index.
template <typename T>
MotionFlow nn_displacement(const Tensor<T>& z, std::size_t patch);

/// Writes `path` (VTNS f64 [F, F, S, 2]) and a JSON sidecar next to it
/// with the extension replaced by ".json".
void save_flow(const std::filesystem::path& path, const MotionFlow& flow);
MotionFlow load_flow(const std::filesystem::path& path);
std::filesystem::path sidecar_path(const std::filesystem::path& path);
std::string sidecar_json(const MotionFlow& flow);

}  // namespace ditflow::amf
