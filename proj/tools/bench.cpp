// Times forward and forward+backward passes of the default toy model.
#include <chrono>
#include <cstdio>

#include "ditflow/kernels.hpp"
#include "ditflow/model.hpp"
#include "ditflow/rng.hpp"

using namespace ditflow;

int main(int argc, char** argv) {
  if (argc > 1) kernels::set_active_isa(std::string_view(argv[1]) == "scalar" ? kernels::Isa::scalar : kernels::Isa::avx2);
  ModelConfig cfg;
  DiTModel<float> model(cfg, 1);
  Rng rng(2);
  auto z = rng.normal_tensor<float>(cfg.latent_shape());
  using clock = std::chrono::steady_clock;
  const int reps = 10;
  auto t0 = clock::now();
  for (int i = 0; i < reps; ++i) model.predict_noise(z, 10, 1);
  auto t1 = clock::now();
  for (int i = 0; i < reps; ++i) {
    ag::Tape<float> tape;
    auto params = model.bind(tape, true);
    ForwardArgs<float> args;
    args.latent = tape.constant(z);
    args.step = 10;
    args.cond = 1;
    auto out = model.forward(tape, params, args);
    tape.backward(ag::sum_squares(out.eps));
  }
  auto t2 = clock::now();
  std::printf("isa=%s forward %.2f ms, forward+backward %.2f ms\n",
              std::string(kernels::isa_name(kernels::active_isa())).c_str(),
              std::chrono::duration<double, std::milli>(t1 - t0).count() / reps,
              std::chrono::duration<double, std::milli>(t2 - t1).count() / reps);
}
