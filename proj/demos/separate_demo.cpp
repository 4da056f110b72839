// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Separates one synthetic two-source mixture and writes the WAVs.
//   separate_demo [model.ckpt] [out_dir]
// Without a checkpoint an untrained toy model is used, which mostly shows
// the plumbing; train one first with `omniscan train --config configs/toy.json`.

#include <filesystem>
#include <iostream>

#include "omniscan/sepnet.hpp"

using namespace omniscan;
namespace fs = std::filesystem;

template <std::floating_point T>
int run(const sepnet::TrainState<T>& st, const fs::path& out) {
  signal::SynthConfig sc;
  sc.seconds = 2.0;
  const signal::Mixture m = signal::synth_mixture(2026, sc);
  const auto est = sepnet::separate(st.params, st.plan, m.mixture);
  fs::create_directories(out);
  signal::wav_write((out / "mix.wav").string(), m.mixture);
  for (std::size_t s = 0; s < est.size(); ++s) {
    const std::string k = std::to_string(s + 1);
    signal::wav_write((out / ("ref" + k + ".wav")).string(), m.sources[s]);
    signal::wav_write((out / ("est" + k + ".wav")).string(), est[s]);
  }
  const auto score = sepnet::score_utterance("demo", est, m.sources, m.mixture);
  std::cout << "SI-SDRi " << score.si_sdri << " dB, SDRi " << score.sdri
            << " dB; WAVs in " << out.string() << "\n";
  return 0;
}

int main(int argc, char** argv) {
  const fs::path out = argc > 2 ? argv[2] : "separate_demo_out";
  try {
    if (argc > 1) {
      const sepnet::SepNetConfig cfg = sepnet::read_checkpoint_config(argv[1]);
      if (cfg.precision == "f32") return run(sepnet::load_checkpoint<float>(argv[1]), out);
      return run(sepnet::load_checkpoint<double>(argv[1]), out);
    }
    sepnet::SepNetConfig cfg;
    cfg.precision = "f32";
    return run(sepnet::TrainState<float>(cfg, 17), out);
  } catch (const std::exception& e) {
    std::cerr << "separate_demo: " << e.what() << "\n";
    return 2;
  }
}
