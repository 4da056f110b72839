// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <malloc.h>

#include <CLI11.hpp>
#include <iostream>

#include "omniscan/cli.hpp"

int main(int argc, char** argv) {
  // Training allocates and frees the same large buffers every step; keep them
  // on the heap instead of round-tripping through mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  using omniscan::cli::RunConfig;
  CLI::App app{"omniscan: omni-directional selective scans for TF separation"};
  app.require_subcommand(1);
  RunConfig rc;
  auto common = [&](CLI::App* sub, bool config) {
    if (config) {
      sub->add_option("--config", rc.config_path, "JSON config file")->check(CLI::ExistingFile);
      sub->add_option("--set", rc.overrides, "key=value override (repeatable)");
    }
    sub->add_option("--seed", rc.seed, "seed, recorded in every output")
        ->capture_default_str();
    sub->add_option("--out", rc.out_dir, "output directory")->capture_default_str();
  };

  auto* verify = app.add_subcommand("verify", "run the oracle suites");
  common(verify, false);
  verify->add_option("--fault", rc.fault,
                     "inject a fault: none, scan_composition, serialization")
      ->capture_default_str();

  auto* train = app.add_subcommand("train", "train the toy separator");
  common(train, true);

  auto* eval = app.add_subcommand("eval", "score a checkpoint or estimates");
  common(eval, true);
  eval->add_option("--checkpoint", rc.checkpoint, "model checkpoint");
  eval->add_option("--data", rc.data_dir,
                   "directory with mix/ and s1/ s2/ ... WAVs (default: synthetic test set)");
  eval->add_option("--estimates", rc.estimates_dir,
                   "directory with s1/ s2/ ... estimate WAVs to score instead of a model");

  auto* bench = app.add_subcommand("bench", "MACs and wall-clock, OA vs attention");
  common(bench, true);

  auto* ablate = app.add_subcommand("ablate", "direction-set and placement ablation");
  common(ablate, true);

  CLI11_PARSE(app, argc, argv);

  try {
    namespace cli = omniscan::cli;
    if (*verify) return cli::cmd_verify(rc);
    if (*train) {
      cli::cmd_train(rc);
      return 0;
    }
    if (*eval) {
      cli::cmd_eval(rc);
      return 0;
    }
    if (*bench) {
      cli::cmd_bench(rc);
      return 0;
    }
    if (*ablate) {
      const auto res = cli::cmd_ablate(rc);
      for (const auto& c : res.cells)
        if (!c.ok) return 1;
      return res.deltas_ok ? 0 : 1;
    }
  } catch (const omniscan::NumericError& e) {
    std::cerr << "numeric error: " << e.what()
              << " (last checkpoint, if any, left in place)\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
