// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

// Full-data reference accuracy for a config's task: networks trained on the
// whole training split under the config's evaluation protocol.
//
//   ratdd_oracle <config.json> <out.json>

#include <iostream>

#include "ratdd/ratdd.hpp"

int main(int argc, char** argv) {
  if (argc != 3) {
    std::cerr << "usage: ratdd_oracle <config.json> <out.json>\n";
    return ratdd::kExitConfig;
  }
  try {
    ratdd::RunConfig cfg = ratdd::parse_config(argv[1]);
    ratdd::LoadedData data = ratdd::load_data(cfg.data);
    ratdd::bind_data(cfg, data.train);
    const auto seeds = ratdd::eval_seeds(cfg.seed, cfg.distill.eval.n_seeds);
    const ratdd::EvalReport rep = ratdd::evaluate_real(data.train, data.test, cfg.distill.arch,
                                                       cfg.distill.eval, seeds);
    nlohmann::json j = rep.to_json();
    j["train_size"] = data.train.size();
    j["test_size"] = data.test.size();
    j["data"] = ratdd::emit_config(cfg)["data"];
    j["model"] = ratdd::emit_config(cfg)["model"];
    ratdd::write_text(argv[2], j.dump(2) + "\n");
    std::cout << "oracle accuracy " << rep.mean << " +- " << rep.std << '\n';
    return ratdd::kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return ratdd::exit_code_for(e);
  }
}
