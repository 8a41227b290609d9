// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

// ratdd command-line entry point.

#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ratdd/ratdd.hpp"

namespace {

ratdd::RunConfig load(const std::string& path, const std::vector<std::string>& sets,
                      std::optional<std::size_t> jobs) {
  std::vector<std::string> overrides = sets;
  if (jobs) overrides.push_back("jobs=" + std::to_string(*jobs));
  if (path.empty()) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& o : overrides) ratdd::apply_override(j, o);
    return ratdd::parse_config_json(j);
  }
  return ratdd::parse_config(path, overrides);
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      const long v = std::stol(item, &used);
      if (used != item.size() || v < 1) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      throw ratdd::ConfigError("--subsample-sizes", "bad size \"" + item + "\"");
    }
  }
  return out;
}

std::vector<ratdd::Estimator> parse_estimators(const std::string& s) {
  std::vector<ratdd::Estimator> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty())
      out.push_back(ratdd::detail::enum_from<ratdd::Estimator>(item, "--estimators"));
  if (out.empty()) throw ratdd::ConfigError("--estimators", "no estimator given");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dataset distillation with randomized truncated unrolling"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, out_path, mode = "forgetting", sizes, estimators;
  std::vector<std::string> sets;
  std::optional<std::size_t> jobs, prefix;

  auto add_common = [&](CLI::App* c, bool need_config) {
    auto* opt = c->add_option("--config", config_path, "JSON run configuration");
    if (need_config) opt->required();
    c->add_option("--set", sets, "Override a key: dotted.path=value");
    c->add_option("--jobs", jobs, "Parallel trainings limit");
  };

  auto* distill = app.add_subcommand("distill", "Distill a dataset");
  add_common(distill, true);
  auto* boost = app.add_subcommand("boost", "Boosted block-wise distillation");
  add_common(boost, true);
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a distilled checkpoint");
  add_common(evaluate, false);
  evaluate->add_option("--checkpoint", checkpoint, "Distilled checkpoint")->required();
  evaluate->add_option("--prefix-blocks", prefix, "Evaluate only the first K blocks");
  evaluate->add_option("--subsample-sizes", sizes, "Per-class subset sizes, e.g. 1,2,5");
  auto* hardness = app.add_subcommand("hardness", "Score example hardness");
  add_common(hardness, true);
  hardness->add_option("--mode", mode, "forgetting or adaptive")
      ->check(CLI::IsMember({"forgetting", "adaptive"}));
  hardness->add_option("--checkpoint", checkpoint, "Distilled set (adaptive mode)");
  auto* compare = app.add_subcommand("compare-estimators", "Run every estimator");
  add_common(compare, true);
  compare->add_option("--estimators", estimators, "Comma-separated estimator list");
  auto* visualize = app.add_subcommand("visualize", "Render a checkpoint as PPM");
  visualize->add_option("--checkpoint", checkpoint, "Distilled checkpoint")->required();
  visualize->add_option("--out", out_path, "Output .ppm path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : ratdd::kExitConfig;
  }

  try {
    if (*visualize) {
      ratdd::cmd_visualize(checkpoint, out_path);
      return ratdd::kExitOk;
    }
    ratdd::RunConfig cfg = load(config_path, sets, jobs);
    if (*distill) {
      ratdd::cmd_distill(cfg);
    } else if (*boost) {
      ratdd::cmd_boost(cfg);
    } else if (*evaluate) {
      ratdd::EvaluateOptions o;
      o.checkpoint = checkpoint;
      o.prefix_blocks = prefix;
      o.subsample_sizes = parse_sizes(sizes);
      ratdd::cmd_evaluate(cfg, o);
    } else if (*hardness) {
      ratdd::cmd_hardness(cfg,
                          mode == "adaptive" ? ratdd::HardnessMode::adaptive
                                             : ratdd::HardnessMode::forgetting,
                          checkpoint);
    } else if (*compare) {
      ratdd::cmd_compare(cfg, estimators.empty() ? cfg.compare_estimators
                                                 : parse_estimators(estimators));
    }
    std::cout << "output: " << ratdd::run_directory(cfg).string() << '\n';
    return ratdd::kExitOk;
  } catch (const ratdd::DistillationAborted& e) {
    std::cerr << "error: " << e.what() << " (aborted at outer step " << e.step() << ")\n";
    return ratdd::kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return ratdd::exit_code_for(e);
  }
}
