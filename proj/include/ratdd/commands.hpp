// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

// Command implementations behind the ratdd executable. Each command writes
// its artifacts under the run directory and returns normally or throws one
// of the ratdd error types; exit_code_for maps those to process status.

#pragma once

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ratdd/boosting.hpp"
#include "ratdd/config.hpp"
#include "ratdd/data.hpp"
#include "ratdd/driver.hpp"
#include "ratdd/evaluation.hpp"
#include "ratdd/hardness.hpp"

namespace ratdd {

inline constexpr const char* kOutputRootEnv = "RATDD_OUTPUT_ROOT";

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitRuntime = 3, kExitIo = 4 };

/// <$RATDD_OUTPUT_ROOT or .>/<output_dir>/<run_id>; an absolute output_dir
/// ignores the root.
inline std::filesystem::path run_directory(const RunConfig& cfg) {
  const char* env = std::getenv(kOutputRootEnv);
  std::filesystem::path root = env && *env ? env : ".";
  return root / cfg.output_dir / cfg.run_id;
}

/// Wall-clock log kept apart from the deterministic artifacts.
class RunLog {
 public:
  explicit RunLog(const std::filesystem::path& path) : out_(path, std::ios::app) {
    if (!out_) throw IoError("cannot open " + path.string());
  }
  void event(const std::string& what) {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    out_ << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ") << ' ' << what << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::filesystem::path prepare_run_directory(const RunConfig& cfg) {
  const auto dir = run_directory(cfg);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_text(dir / "config.resolved.json", emit_config(cfg).dump(2) + "\n");
  return dir;
}

struct LoadedData {
  DatasetSplit train, test;
  std::optional<ZcaTransform> zca;
};

/// Loads or generates the data named by `cfg.data`, whitening it if asked.
inline LoadedData load_data(const DataConfig& d) {
  LoadedData out;
  switch (d.source) {
    case DataSource::synthetic:
      std::tie(out.train, out.test) = make_synthetic(d.kind, d.synthetic, d.seed);
      break;
    case DataSource::idx:
      out.train = load_idx(d.train_images, d.train_labels, d.classes);
      out.test = load_idx(d.test_images, d.test_labels, out.train.classes);
      break;
    case DataSource::csv:
      out.train = load_csv(d.train_csv, d.classes);
      out.test = load_csv(d.test_csv, out.train.classes);
      break;
  }
  out.test.split = SplitTag::test;
  if (out.test.classes != out.train.classes)
    throw ConfigError("data", "train and test class counts differ");
  if (d.zca) {
    out.zca = zca_fit(out.train.inputs, d.zca_lambda);
    out.train.inputs = zca_apply(*out.zca, out.train.inputs);
    out.test.inputs = zca_apply(*out.zca, out.test.inputs);
  }
  return out;
}

/// Fills the data-dependent architecture fields.
inline void bind_data(RunConfig& cfg, const DatasetSplit& train) {
  cfg.distill.arch.input_shape = train.input_shape();
  cfg.distill.arch.classes = train.classes;
  try {
    cfg.distill.arch.validate();
  } catch (const ContractError& e) {
    throw ConfigError("model", e.what());
  }
}

// ---------------------------------------------------------------------------
// Commands

/// distill: metrics.jsonl, distilled.ddc, eval.json.
inline void cmd_distill(RunConfig cfg) {
  const auto dir = prepare_run_directory(cfg);
  RunLog log(dir / "timestamps.log");
  log.event("distill start");
  LoadedData data = load_data(cfg.data);
  bind_data(cfg, data.train);
  std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary);
  if (!metrics) throw IoError("cannot write " + (dir / "metrics.jsonl").string());
  auto on_step = [&](const StepMetrics& m) {
    metrics << m.to_json().dump() << '\n';
    if (m.eval_acc) log.event("step " + std::to_string(m.step) + " evaluated");
  };
  RunResult r;
  try {
    r = run_distillation(cfg.distill, data.train, data.test, std::nullopt, on_step);
  } catch (const DistillationAborted&) {
    log.event("distill aborted");
    throw;
  }
  metrics.close();
  save_checkpoint(r.u, (dir / "distilled.ddc").string());
  if (cfg.distill.outer_steps > 0) {
    const auto rep = evaluate_distilled(r.u, data.test, cfg.distill.arch, cfg.distill.eval,
                                        eval_seeds(cfg.seed, cfg.distill.eval.n_seeds));
    write_text(dir / "eval.json", rep.to_json().dump(2) + "\n");
  }
  log.event("distill done");
}

/// boost: stage_<k>.ddc after each stage, boosted.ddc, metrics_stage<k>.jsonl.
inline void cmd_boost(RunConfig cfg) {
  const auto dir = prepare_run_directory(cfg);
  RunLog log(dir / "timestamps.log");
  log.event("boost start");
  LoadedData data = load_data(cfg.data);
  bind_data(cfg, data.train);
  BoostConfig b;
  b.block_size = cfg.boost.block_size == 0 ? data.train.classes : cfg.boost.block_size;
  b.blocks = cfg.boost.blocks;
  b.beta = cfg.boost.beta;
  b.stage_steps = cfg.boost.stage_steps;
  b.continue_optimizer = cfg.boost.continue_optimizer;
  b.base = cfg.distill;
  try {
    b.validate(data.train.classes);
  } catch (const ContractError& e) {
    throw ConfigError("boost.block_size", e.what());
  }
  BoostResult r = boost_distill(b, data.train, data.test);
  for (std::size_t k = 0; k < r.stage_snapshots.size(); ++k) {
    const std::string tag = std::to_string(k + 1);
    save_checkpoint(r.stage_snapshots[k], (dir / ("stage_" + tag + ".ddc")).string());
    write_text(dir / ("metrics_stage" + tag + ".jsonl"), r.stage_histories[k].jsonl());
  }
  save_checkpoint(r.u, (dir / "boosted.ddc").string());
  log.event("boost done");
}

struct EvaluateOptions {
  std::string checkpoint;
  std::optional<std::size_t> prefix_blocks;
  std::vector<std::size_t> subsample_sizes;
};

/// evaluate: evaluate.json and, with subsample sizes, subsample.csv.
inline void cmd_evaluate(RunConfig cfg, const EvaluateOptions& opt) {
  DistilledDataset u = load_checkpoint(opt.checkpoint);
  const auto dir = prepare_run_directory(cfg);
  RunLog log(dir / "timestamps.log");
  log.event("evaluate start");
  LoadedData data = load_data(cfg.data);
  bind_data(cfg, data.train);
  if (u.input_shape() != cfg.distill.arch.input_shape || u.classes() != data.train.classes)
    throw ConfigError("data", "checkpoint shape " + shape_str(u.input_shape()) +
                                  " does not match the data " +
                                  shape_str(cfg.distill.arch.input_shape));
  if (opt.prefix_blocks) {
    if (*opt.prefix_blocks < 1 || *opt.prefix_blocks > u.num_blocks())
      throw ConfigError("--prefix-blocks", "must lie in [1, " +
                                               std::to_string(u.num_blocks()) + "]");
    u = prefix_blocks(u, *opt.prefix_blocks);
  }
  const auto seeds = eval_seeds(cfg.seed, cfg.distill.eval.n_seeds);
  const EvalReport rep =
      evaluate_distilled(u, data.test, cfg.distill.arch, cfg.distill.eval, seeds);
  json j = rep.to_json();
  j["checkpoint"] = opt.checkpoint;
  j["points"] = u.size();
  j["blocks"] = u.num_blocks();
  write_text(dir / "evaluate.json", j.dump(2) + "\n");
  std::vector<std::size_t> sizes =
      opt.subsample_sizes.empty() ? cfg.subsample_sizes : opt.subsample_sizes;
  if (!sizes.empty()) {
    Rng rng = make_rng(cfg.seed, "evaluate/subsample");
    const auto rows = subsample_eval(u, sizes, data.train, data.test, cfg.distill.arch,
                                     cfg.distill.eval, seeds, rng);
    write_text(dir / "subsample.csv", subsample_csv(rows));
  }
  log.event("evaluate done");
}

enum class HardnessMode { forgetting, adaptive };

/// hardness: hardness.csv plus a score histogram in hardness_summary.json.
/// Adaptive mode scores the training set against a distilled checkpoint.
inline void cmd_hardness(RunConfig cfg, HardnessMode mode,
                         const std::string& checkpoint = {}) {
  const auto dir = prepare_run_directory(cfg);
  RunLog log(dir / "timestamps.log");
  log.event("hardness start");
  LoadedData data = load_data(cfg.data);
  bind_data(cfg, data.train);
  HardnessTable t;
  if (mode == HardnessMode::forgetting) {
    ForgettingConfig fc;
    fc.train = cfg.distill.eval.train;
    fc.epochs = cfg.hardness.epochs;
    fc.batch = cfg.hardness.batch;
    fc.n_seeds = cfg.hardness.n_seeds;
    fc.jobs = cfg.jobs;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < fc.n_seeds; ++i)
      seeds.push_back(derive_seed(cfg.seed, "hardness/forgetting", i));
    t = forgetting_scores(data.train, cfg.distill.arch, fc, seeds);
  } else {
    if (checkpoint.empty())
      throw ConfigError("--checkpoint", "adaptive mode needs a distilled checkpoint");
    const DistilledDataset u = load_checkpoint(checkpoint);
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < cfg.hardness.n_nets; ++i)
      seeds.push_back(derive_seed(cfg.seed, "hardness/adaptive", i));
    t = adaptive_hardness(u, data.train, cfg.distill.arch, cfg.distill.eval.train, seeds);
  }
  write_hardness_csv(t, (dir / "hardness.csv").string());
  std::map<int, std::size_t> hist;
  for (int s : t.scores) ++hist[s];
  json h = json::object();
  for (const auto& [s, n] : hist) h[std::to_string(s)] = n;
  write_text(dir / "hardness_summary.json",
             json{{"mode", mode == HardnessMode::forgetting ? "forgetting" : "adaptive"},
                  {"runs", t.n_runs},
                  {"histogram", h}}
                     .dump(2) + "\n");
  log.event("hardness done");
}

/// Per-step CSV: step,outer_loss,grad_norm,eval_acc (eval_acc empty when
/// the step was not evaluated).
inline std::string history_csv(const History& h) {
  std::ostringstream os;
  os.precision(17);
  os << "step,outer_loss,grad_norm,eval_acc\n";
  for (const auto& s : h.steps) {
    os << s.step << ',' << s.outer_loss << ',' << s.grad_norm << ',';
    if (s.eval_acc) os << *s.eval_acc;
    os << '\n';
  }
  return os.str();
}

/// compare-estimators: compare_<estimator>.csv per estimator and a summary
/// with grad-norm statistics and final accuracy.
inline void cmd_compare(RunConfig cfg, const std::vector<Estimator>& estimators) {
  const auto dir = prepare_run_directory(cfg);
  RunLog log(dir / "timestamps.log");
  LoadedData data = load_data(cfg.data);
  bind_data(cfg, data.train);
  json summary = json::object();
  for (Estimator e : estimators) {
    log.event(std::string("estimator ") + to_string(e) + " start");
    DistillationConfig dc = cfg.distill;
    dc.unroll.estimator = e;
    const RunResult r = run_distillation(dc, data.train, data.test);
    write_text(dir / (std::string("compare_") + to_string(e) + ".csv"),
               history_csv(r.history));
    std::vector<double> norms;
    for (const auto& s : r.history.steps) norms.push_back(s.grad_norm);
    json entry = {{"final_eval_acc", r.history.evals.empty()
                                         ? json(nullptr)
                                         : json(r.history.evals.back().second)}};
    if (!norms.empty()) {
      const GradNormStats st = grad_norm_stats(norms);
      entry["grad_norm_mean"] = st.mean;
      entry["grad_norm_std"] = st.std;
      entry["grad_norm_cv"] = st.cv();
    }
    summary[to_string(e)] = entry;
  }
  write_text(dir / "compare_summary.json", summary.dump(2) + "\n");
  log.event("compare done");
}

/// visualize: a PPM grid, one row per class for class-ordered sets.
inline void cmd_visualize(const std::string& checkpoint, const std::string& out,
                          std::size_t scale = 4) {
  const DistilledDataset u = load_checkpoint(checkpoint);
  const std::size_t cols = std::max<std::size_t>(1, u.size() / u.classes());
  write_text(out, ppm_grid(u.inputs, cols, scale));
}

// ---------------------------------------------------------------------------

/// Process status for an exception escaping a command.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e))
    return kExitIo;
  return kExitRuntime;
}

}  // namespace ratdd
