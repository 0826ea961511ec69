#pragma once

// Transfer benchmark: guided vs unguided agreement with the reference flow
// over a set of clips and seeds. Shared by `ablate` and the acceptance run.

#include <cstdint>
#include <vector>

#include "ditflow/evalkit.hpp"
#include "ditflow/guidance.hpp"
#include "ditflow/synthgen.hpp"

namespace ditflow::bench {

/// Clips with whole-cell velocities, balanced over the six conditions.
std::vector<synth::VideoClip> benchmark_clips(std::size_t count, std::uint64_t seed, const ModelConfig& cfg);

struct BenchRun {
  std::size_t clip = 0;
  std::uint64_t seed = 0;
  double guided_cosine = 0;
  double unguided_cosine = 0;
  double guided_epe = 0;
  double guided_rms = 0;  // root mean square of the generated values
  double unguided_rms = 0;
  std::vector<guidance::LossRecord> trace;
};

struct BenchSummary {
  double mean_guided = 0;
  double mean_unguided = 0;
  double mean_guided_epe = 0;
  double mean_guided_rms = 0;
  double mean_unguided_rms = 0;
  std::vector<BenchRun> runs;

  double margin() const { return mean_guided - mean_unguided; }
};

/// For each clip: the reference flow at cfg.block, the KV cache if
/// cfg.inject_kv, then one guided and one plain run per seed
/// (seed_base + s). The unguided baseline never injects KV. Generation uses
/// the clip's own condition.
BenchSummary run_transfer_benchmark(const DiTModel<float>& model, const std::vector<synth::VideoClip>& clips,
                                    std::size_t seeds, const guidance::GuidanceConfig& cfg, std::uint64_t seed_base,
                                    eval::MaskPolicy policy = eval::MaskPolicy::reference_nonzero);

}  // namespace ditflow::bench
