// Copyright (c) 2026 ptlab contributors
// SPDX-License-Identifier: Apache-2.0
//
// ptlab CLI: `run` executes a configured experiment grid, `diagnose` compares
// two checkpoints over a probe dataset, `ladder` re-verifies the attention
// equivalence chain on random instances.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ptlab/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{
      "ptlab: a desk-scale laboratory for context-based parameter-efficient "
      "fine-tuning"};
  app.require_subcommand(1);

  std::string run_config;
  std::string run_out;
  std::uint64_t run_seed = 0;
  CLI::App* run = app.add_subcommand("run", "run the configured method-by-round grid");
  run->add_option("--config", run_config, "experiment config JSON path")->required();
  run->add_option("--out", run_out,
                  "output directory (overrides config and PTLAB_OUT_DIR)");
  CLI::Option* run_seed_opt =
      run->add_option("--seed", run_seed, "override the experiment seed");

  ptlab::DiagnoseArgs dargs;
  bool raw_bias = false;
  CLI::App* diag = app.add_subcommand(
      "diagnose", "compare a tuned checkpoint against its base over a probe set");
  diag->add_option("base", dargs.base_ckpt, "base model checkpoint")->required();
  diag->add_option("tuned", dargs.tuned_ckpt, "tuned model checkpoint")->required();
  diag->add_option("dataset", dargs.dataset_path, "probe dataset file")->required();
  diag->add_option("--out", dargs.out_dir, "output directory");
  diag->add_option("--layer", dargs.layer, "layer to probe");
  diag->add_option("--head", dargs.head, "head for the attention map");
  diag->add_option("--topk", dargs.top_k, "eigenvalues to report");
  diag->add_flag("--raw-bias", raw_bias,
                 "skip column standardization of the bias matrix");

  std::string ladder_config;
  std::string ladder_out = ".";
  std::uint64_t ladder_seed = 1;
  std::size_t ladder_trials = 40;
  bool inject_fault = false;
  CLI::App* ladder =
      app.add_subcommand("ladder", "verify the equivalence ladder on random instances");
  ladder->add_option("--config", ladder_config,
                     "optional config JSON; its seed is used unless --seed is given");
  CLI::Option* ladder_seed_opt =
      ladder->add_option("--seed", ladder_seed, "instance-sampling seed");
  ladder->add_option("--trials", ladder_trials, "instances per equivalence check");
  ladder->add_option("--out", ladder_out, "directory for failure dumps");
  ladder->add_flag("--inject-fault", inject_fault,
                   "perturb the decomposition reassembly (negative control)");

  CLI11_PARSE(app, argc, argv);

  if (run->parsed()) {
    std::optional<std::uint64_t> seed;
    if (run_seed_opt->count() > 0) seed = run_seed;
    return ptlab::cmd_run(run_config, run_out, seed, std::cout);
  }
  if (diag->parsed()) {
    dargs.standardize = !raw_bias;
    return ptlab::cmd_diagnose(dargs, std::cout);
  }
  if (!ladder_config.empty() && ladder_seed_opt->count() == 0) {
    std::ifstream in(ladder_config);
    if (!in) {
      std::cout << "error: cannot open config '" << ladder_config << "'\n";
      return 1;
    }
    try {
      nlohmann::json j = nlohmann::json::parse(in);
      ladder_seed = j.value("seed", std::uint64_t{1});
    } catch (const std::exception& e) {
      std::cout << "config error: " << e.what() << "\n";
      return 1;
    }
  }
  return ptlab::cmd_ladder(ladder_seed, ladder_trials, inject_fault, ladder_out,
                           std::cout);
}
