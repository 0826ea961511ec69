#include "ditflow/bench.hpp"

#include <cmath>

namespace ditflow::bench {

namespace {

double rms(const Tensor<float>& t) {
  double s = 0;
  for (float v : t.values()) s += double(v) * v;
  return t.size() ? std::sqrt(s / double(t.size())) : 0.0;
}

}  // namespace

std::vector<synth::VideoClip> benchmark_clips(std::size_t count, std::uint64_t seed, const ModelConfig& cfg) {
  synth::SpecOptions opts;
  opts.cell_multiple = true;
  return synth::gen_dataset(count, seed, cfg, opts).clips;
}

BenchSummary run_transfer_benchmark(const DiTModel<float>& model, const std::vector<synth::VideoClip>& clips,
                                    std::size_t seeds, const guidance::GuidanceConfig& cfg, std::uint64_t seed_base,
                                    eval::MaskPolicy policy) {
  BenchSummary out;
  for (std::size_t c = 0; c < clips.size(); ++c) {
    const auto& clip = clips[c];
    const auto ref = amf::extract_reference_amf(model, clip.pixels, cfg.block, cfg.tau);
    std::optional<KVCache<float>> kv;
    if (cfg.inject_kv) kv = guidance::capture_reference_kv(model, clip.pixels, cfg.injection_block);
    for (std::size_t s = 0; s < seeds; ++s) {
      auto g = cfg;
      g.seed = seed_base + s;
      auto res = guidance::ditflow_generate(model, ref, kv ? &*kv : nullptr, clip.cond, g);
      auto plain = guidance::sample_unguided(model, clip.cond, g.seed);
      const auto guided = eval::displacement_agreement(guidance::video_flow(model, res.video, g), ref, policy);
      const auto unguided = eval::displacement_agreement(guidance::video_flow(model, plain, g), ref, policy);
      out.runs.push_back({c, g.seed, guided.mean_cosine, unguided.mean_cosine, guided.mean_epe, rms(res.video), rms(plain),
                          std::move(res.trace)});
    }
  }
  for (const auto& r : out.runs) {
    out.mean_guided += r.guided_cosine;
    out.mean_unguided += r.unguided_cosine;
    out.mean_guided_epe += r.guided_epe;
    out.mean_guided_rms += r.guided_rms;
    out.mean_unguided_rms += r.unguided_rms;
  }
  if (!out.runs.empty()) {
    const double n = double(out.runs.size());
    out.mean_guided /= n;
    out.mean_unguided /= n;
    out.mean_guided_epe /= n;
    out.mean_guided_rms /= n;
    out.mean_unguided_rms /= n;
  }
  return out;
}

}  // namespace ditflow::bench
