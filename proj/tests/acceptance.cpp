// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: one PASS/FAIL line per criterion. Exits 1 if any
// criterion fails.
//
//   acceptance [criterion ...]     run all criteria, or the listed ones

#include <sys/wait.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "linear_oracle.hpp"
#include "ratdd/ratdd.hpp"
#include "test_util.hpp"

using namespace ratdd;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Tolerances and budgets.
constexpr double kFdTol = 1e-4;
constexpr double kClosedFormTol = 1e-8;
constexpr double kEquivTol = 1e-10;
constexpr double kChiSquareP = 1e-3;
constexpr std::size_t kChiSquareDraws = 100000;
constexpr double kFreqTol = 0.03;
constexpr std::size_t kFreqDraws = 100000;
constexpr double kZcaRoundTrip = 1e-8;
constexpr double kZcaIdentity = 1e-10;
constexpr double kRankSlack = 0.005;       // 0.5 accuracy points
constexpr double kBoostSlack = 0.03;       // 3 accuracy points
constexpr double kOracleFraction = 0.9;
constexpr std::size_t kRepetitions = 5;
constexpr std::size_t kRequiredWins = 4;
constexpr std::size_t kJointIpc = 10;

const std::string kDeskConfig = std::string(RATDD_SOURCE_DIR) + "/configs/desk_blobs.json";
const std::string kOracleFixture = std::string(RATDD_FIXTURE_DIR) + "/blobs_oracle.json";

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

struct Desk {
  RunConfig cfg;
  LoadedData data;
  Desk() : cfg(parse_config(kDeskConfig)), data(load_data(cfg.data)) {
    bind_data(cfg, data.train);
  }
};

Desk& desk() {
  static Desk d;
  return d;
}

// ---------------------------------------------------------------------------
// 1. Meta-gradient correctness on the linear task.

struct LinearTask {
  ArchitectureSpec spec;
  UnrollConfig cfg;
  DistilledDataset u;
  TargetBatch target;
  ParamVector theta0;

  LinearTask() {
    spec.kind = ModelKind::linear;
    spec.hidden = {};
    spec.input_shape = {2};
    spec.classes = 2;
    cfg.T = 3;
    cfg.M = 2;
    cfg.inner_opt.kind = InnerOptKind::sgd;
    cfg.inner_opt.lr = 0.3;
    cfg.inner_loss = LossKind::mse;
    cfg.outer_loss = LossKind::mse;
    u = init_distilled({2}, 2, 2, true, 21);
    u.soft_labels = tu::random_tensor({4, 2}, 22, 0.2, 1.0);
    target.inputs = tu::random_tensor({8, 2}, 23, -2.0, 2.0);
    target.labels = one_hot({0, 1, 0, 1, 1, 0, 1, 0}, 2);
    theta0 = init_params(spec, 24);
    theta0.values[1] = ad::Var(tu::random_tensor({2}, 25));
  }

  /// Outer loss with the window steps [begin, N) run on (x, y) and the
  /// steps before the window on the unperturbed set. SGD carries no state,
  /// so the two segments compose exactly.
  double objective(const Tensor& x, const Tensor& y, const WindowSample& w) const {
    DistilledDataset v = u;
    v.inputs = x;
    v.soft_labels = y;
    Rng batch(0);
    ad::NoGradGuard ng;
    ParamVector theta = theta0;
    if (w.begin > 0) theta = unroll_inner(spec, theta, u, cfg, {w.begin, 0}, batch).params;
    theta = unroll_inner(spec, theta, v, cfg, {w.N - w.begin, 0}, batch).params;
    return task_loss(cfg.outer_loss, forward(spec, theta, ad::Var(target.inputs)),
                     ad::Var(target.labels))
        .item();
  }
};

Outcome meta_gradient_correctness() {
  LinearTask t;
  double worst_fd = 0.0;
  for (Estimator e : {Estimator::bptt, Estimator::tbptt, Estimator::rbptt, Estimator::ratbptt}) {
    t.cfg.estimator = e;
    Rng rng(300 + static_cast<int>(e));
    for (int rep = 0; rep < 3; ++rep) {
      const WindowSample w = sample_window(t.cfg, rng);
      Rng batch(0);
      const MetaGradient g = meta_gradient_at(t.u, t.target, t.spec, t.cfg, w, t.theta0, batch);
      const Tensor fx = finite_diff_gradient(
          [&](const Tensor& p) { return t.objective(p, t.u.soft_labels, w); }, t.u.inputs, 1e-6);
      const Tensor fy = finite_diff_gradient(
          [&](const Tensor& p) { return t.objective(t.u.inputs, p, w); }, t.u.soft_labels, 1e-6);
      worst_fd = std::max({worst_fd, relative_error(g.input_grad, fx),
                           relative_error(*g.label_grad, fy)});
    }
  }
  // Closed-form hypergradient of the quadratic unroll.
  oracle::LinearUnroll ref;
  oracle::MatrixXd th(3, 2);
  th.topRows(2) = oracle::to_matrix(t.theta0.values[0].value());
  th.row(2) = oracle::to_matrix(t.theta0.values[1].value().reshaped({1, 2}));
  ref.theta0 = th;
  ref.Z = oracle::to_matrix(t.target.inputs);
  ref.Yt = oracle::to_matrix(t.target.labels);
  ref.lr = t.cfg.inner_opt.lr;
  t.cfg.estimator = Estimator::bptt;
  Rng batch(0);
  const MetaGradient g = meta_gradient_at(t.u, t.target, t.spec, t.cfg, {3, 0}, t.theta0, batch);
  const auto [gx, gy] = oracle::hypergradient(ref, oracle::to_matrix(t.u.inputs),
                                              oracle::to_matrix(t.u.soft_labels), 3, 0);
  const double closed = std::max(relative_error(g.input_grad, oracle::to_tensor(gx)),
                                 relative_error(*g.label_grad, oracle::to_tensor(gy)));
  return {worst_fd <= kFdTol && closed <= kClosedFormTol,
          "max rel err vs FD " + fmt(worst_fd) + " (tol " + fmt(kFdTol) +
              "), BPTT vs closed form " + fmt(closed) + " (tol " + fmt(kClosedFormTol) + ")"};
}

// ---------------------------------------------------------------------------
// 2. Estimator equivalences with identical seeds.

Outcome estimator_equivalences() {
  ArchitectureSpec spec;
  spec.input_shape = {2};
  spec.hidden = {8};
  spec.classes = 3;
  DistilledDataset u = init_distilled({2}, 3, 2, true, 31);
  TargetBatch target{tu::random_tensor({12, 2}, 32, -2.0, 2.0),
                     one_hot({0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2}, 3)};
  auto run = [&](Estimator e, std::size_t T, std::size_t M, std::uint64_t seed,
                 std::optional<WindowSample> w = {}) {
    UnrollConfig c;
    c.estimator = e;
    c.T = T;
    c.M = M;
    c.inner_opt.lr = 0.01;
    Rng rng(seed);
    return meta_gradient(u, target, spec, c, rng, w);
  };
  auto diff = [](const MetaGradient& a, const MetaGradient& b) {
    return std::max(relative_error(a.input_grad, b.input_grad),
                    relative_error(*a.label_grad, *b.label_grad));
  };
  const double d1 = diff(run(Estimator::ratbptt, 16, 16, 1), run(Estimator::bptt, 16, 16, 1));
  const double d2 =
      diff(run(Estimator::ratbptt, 16, 5, 2, WindowSample{16, 11}), run(Estimator::tbptt, 16, 5, 2));
  const double d3 =
      diff(run(Estimator::rbptt, 16, 5, 3, WindowSample{16, 0}), run(Estimator::bptt, 16, 5, 3));
  const double worst = std::max({d1, d2, d3});
  return {worst <= kEquivTol, "RaT(M=T)~BPTT " + fmt(d1) + ", RaT|N=T~T-BPTT " + fmt(d2) +
                                  ", R|N=T~BPTT " + fmt(d3) + " (tol " + fmt(kEquivTol) + ")"};
}

// ---------------------------------------------------------------------------
// 3 and 4. Estimator runs on the desk task.

struct EstimatorRun {
  double cv = 0.0;
  double final_acc = 0.0;
};

EstimatorRun desk_run(Estimator e, std::uint64_t seed, std::size_t M) {
  DistillationConfig c = desk().cfg.distill;
  c.seed = seed;
  c.unroll.estimator = e;
  c.unroll.M = M;
  const RunResult r = run_distillation(c, desk().data.train, desk().data.test);
  std::vector<double> norms;
  for (const auto& s : r.history.steps) norms.push_back(s.grad_norm);
  return {grad_norm_stats(norms).cv(), r.history.evals.back().second};
}

Outcome gradient_stability() {
  std::size_t wins = 0;
  std::string per;
  for (std::uint64_t seed = 1; seed <= kRepetitions; ++seed) {
    const double bptt = desk_run(Estimator::bptt, seed, 20).cv;
    const double tbptt = desk_run(Estimator::tbptt, seed, 20).cv;
    wins += bptt > tbptt;
    per += " " + fmt(bptt) + (bptt > tbptt ? ">" : "<=") + fmt(tbptt);
  }
  return {wins >= kRequiredWins, "CV(BPTT) > CV(T-BPTT M=20) in " + std::to_string(wins) + "/" +
                                     std::to_string(kRepetitions) + " (need " +
                                     std::to_string(kRequiredWins) + "):" + per};
}

Outcome estimator_ranking() {
  std::size_t wins = 0;
  std::string per;
  const std::size_t M = desk().cfg.distill.unroll.M;
  for (std::uint64_t seed = 1; seed <= kRepetitions; ++seed) {
    const double rat = desk_run(Estimator::ratbptt, seed, M).final_acc;
    double best_other = 0.0;
    for (Estimator e : {Estimator::bptt, Estimator::tbptt, Estimator::rbptt})
      best_other = std::max(best_other, desk_run(e, seed, M).final_acc);
    const bool ok = rat >= best_other - kRankSlack;
    wins += ok;
    per += " " + fmt(rat) + (ok ? ">=" : "<") + fmt(best_other) + "-" + fmt(kRankSlack);
  }
  return {wins >= kRequiredWins, "RaT-BPTT within slack of best baseline in " +
                                     std::to_string(wins) + "/" + std::to_string(kRepetitions) +
                                     ":" + per};
}

// ---------------------------------------------------------------------------
// 5. Distillation efficacy against the stored full-data oracle.

Outcome distillation_efficacy() {
  std::ifstream in(kOracleFixture);
  if (!in) return {false, "missing oracle fixture " + kOracleFixture};
  const json oracle = json::parse(in);
  const json emitted = emit_config(desk().cfg);
  if (oracle["data"] != emitted["data"] || oracle["model"] != emitted["model"])
    return {false, "oracle fixture was produced for a different task"};
  const double ref = oracle["mean"].get<double>();
  const RunResult r = run_distillation(desk().cfg.distill, desk().data.train, desk().data.test);
  const auto seeds = eval_seeds(desk().cfg.seed, desk().cfg.distill.eval.n_seeds);
  const EvalReport rep = evaluate_distilled(r.u, desk().data.test, desk().cfg.distill.arch,
                                            desk().cfg.distill.eval, seeds);
  return {rep.n_seeds == 10 && rep.mean >= kOracleFraction * ref,
          "IPC1 accuracy " + fmt(rep.mean) + " +- " + fmt(rep.std) + " over " +
              std::to_string(rep.n_seeds) + " seeds, oracle " + fmt(ref) + ", need >= " +
              fmt(kOracleFraction * ref)};
}

// ---------------------------------------------------------------------------
// 6. Boosting nesting and prefix accuracy.

Outcome boosting_nesting() {
  const RunConfig& rc = desk().cfg;
  BoostConfig b;
  b.block_size = desk().data.train.classes;
  b.blocks = rc.boost.blocks;
  b.beta = 0.0;
  b.stage_steps = rc.boost.stage_steps;
  b.base = rc.distill;
  const BoostResult r = boost_distill(b, desk().data.train, desk().data.test);
  // Points, labels and block layout; the per-block lr scales are optimizer
  // metadata that differ between stages by construction.
  bool nested = true;
  for (std::size_t k = 1; k <= b.blocks; ++k) {
    const DistilledDataset p = prefix_blocks(r.u, k);
    const DistilledDataset& s = r.stage_snapshots[k - 1];
    nested &= bit_identical(p.inputs, s.inputs) && bit_identical(p.soft_labels, s.soft_labels) &&
              p.block_boundaries == s.block_boundaries;
  }
  const auto seeds = eval_seeds(rc.seed, rc.distill.eval.n_seeds);
  bool close = true;
  std::string per;
  for (std::size_t k = 1; k <= b.blocks; ++k) {
    const double prefix = evaluate_distilled(prefix_blocks(r.u, k), desk().data.test,
                                             rc.distill.arch, rc.distill.eval, seeds)
                              .mean;
    DistillationConfig direct = rc.distill;
    direct.ipc = k;
    direct.outer_steps = k * b.stage_steps;
    const RunResult d = run_distillation(direct, desk().data.train, desk().data.test);
    const double dacc =
        evaluate_distilled(d.u, desk().data.test, rc.distill.arch, rc.distill.eval, seeds).mean;
    close &= std::abs(prefix - dacc) <= kBoostSlack;
    per += " k=" + std::to_string(k) + ":" + fmt(prefix) + "/" + fmt(dacc);
  }
  return {nested && close, std::string("prefixes bit-identical to stages: ") +
                               (nested ? "yes" : "no") + "; prefix/direct accuracy" + per +
                               " (tol " + fmt(kBoostSlack) + ")"};
}

// ---------------------------------------------------------------------------
// 7. Intercorrelation: subset of a joint set versus a direct set.

Outcome intercorrelation() {
  const RunConfig& rc = desk().cfg;
  DistillationConfig joint = rc.distill;
  joint.ipc = kJointIpc;
  const RunResult j = run_distillation(joint, desk().data.train, desk().data.test);
  DistillationConfig direct = rc.distill;
  direct.ipc = 1;
  const RunResult d = run_distillation(direct, desk().data.train, desk().data.test);
  Rng rng = make_rng(rc.seed, "evaluate/subsample");
  const auto rows = subsample_eval(j.u, {1}, desk().data.train, desk().data.test,
                                   rc.distill.arch, rc.distill.eval,
                                   eval_seeds(rc.seed, 10), rng, {{1, d.u}});
  const EvalReport& sub = rows[0].distilled_sub;
  const EvalReport& dir = *rows[0].direct;
  const bool ok = sub.mean + sub.std < dir.mean - dir.std;
  return {ok, "subset of joint IPC" + std::to_string(kJointIpc) + ": " + fmt(sub.mean) +
                  " +- " + fmt(sub.std) + ", direct IPC1: " + fmt(dir.mean) + " +- " +
                  fmt(dir.std) + ", real 1/class: " + fmt(rows[0].real.mean)};
}

// ---------------------------------------------------------------------------
// 8. Window-sampling uniformity.

Outcome window_uniformity() {
  UnrollConfig c;
  c.estimator = Estimator::ratbptt;
  c.T = 60;
  c.M = 20;
  Rng rng(8);
  std::map<std::size_t, std::size_t> counts;
  for (std::size_t i = 0; i < kChiSquareDraws; ++i) ++counts[sample_window(c, rng).N];
  const std::size_t k = c.T - c.M + 1;
  const double expect = static_cast<double>(kChiSquareDraws) / static_cast<double>(k);
  double chi2 = 0.0;
  bool support = counts.size() == k && counts.begin()->first == c.M && counts.rbegin()->first == c.T;
  for (std::size_t n = c.M; n <= c.T; ++n) {
    const double o = static_cast<double>(counts[n]);
    chi2 += (o - expect) * (o - expect) / expect;
  }
  const double p =
      boost::math::cdf(boost::math::complement(boost::math::chi_squared(double(k - 1)), chi2));
  return {support && p > kChiSquareP, "chi2 " + fmt(chi2) + " on " + std::to_string(k - 1) +
                                          " dof, p = " + fmt(p) + " (need > " + fmt(kChiSquareP) +
                                          ")"};
}

// ---------------------------------------------------------------------------
// 9. Hardness suite.

Outcome hardness_suite() {
  bool events = forgetting_events({true, false, true, true, false, true}) == 2 &&
                forgetting_events({true, true, true}) == 0 &&
                forgetting_events({false, false}) == 0 &&
                forgetting_events({true, false, true, false}) == 2 &&
                forgetting_events({false, true, false}) == 1;
  HardnessTable t;
  for (int s = 0; s <= 8; ++s) t.scores.push_back(s);
  t.raw.assign(t.scores.begin(), t.scores.end());
  bool table = true;
  for (double thr : {1.0, 4.0}) {
    const auto w = sampler_weights(t, thr).weights;
    for (int s = 0; s <= 8; ++s) table &= w[s] == thr + std::abs(s - 4);
  }
  const std::vector<double> w = sampler_weights(t, 1.0).weights;
  double total = 0.0;
  for (double v : w) total += v;
  std::vector<std::size_t> count(w.size());
  Rng rng(9);
  for (std::size_t i = 0; i < kFreqDraws; ++i) ++count[weighted_batch(w, 1, rng)[0]];
  double worst = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double p = w[i] / total;
    worst = std::max(worst, std::abs(static_cast<double>(count[i]) / kFreqDraws - p) / p);
  }
  return {events && table && worst <= kFreqTol,
          std::string("forgetting cases ") + (events ? "ok" : "WRONG") + ", weight table " +
              (table ? "exact" : "WRONG") + ", worst relative frequency error " + fmt(worst) +
              " (tol " + fmt(kFreqTol) + ")"};
}

// ---------------------------------------------------------------------------
// 10. Round trips.

Outcome round_trips() {
  DistillationConfig c = desk().cfg.distill;
  c.outer_steps = 20;
  const RunResult r = run_distillation(c, desk().data.train, desk().data.test);
  const fs::path p = fs::temp_directory_path() / "ratdd_acceptance.ddc";
  save_checkpoint(r.u, p.string());
  const DistilledDataset back = load_checkpoint(p.string());
  const bool ckpt = bit_identical(back.inputs, r.u.inputs) &&
                    bit_identical(back.soft_labels, r.u.soft_labels) && back == r.u;

  Tensor x = tu::random_tensor({200, 5}, 10);
  for (std::size_t i = 0; i < 200; ++i) x.at(i, 3) += 0.5 * x.at(i, 1);
  const ZcaTransform z = zca_fit(x, 0.1);
  const Tensor y = zca_invert(z, zca_apply(z, x));
  double rt = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) rt = std::max(rt, std::abs(y[i] - x[i]));

  const double a = std::sqrt(3.0);  // population covariance I
  Tensor iso(Shape{6, 3});
  for (std::size_t d = 0; d < 3; ++d) {
    iso.at(2 * d, d) = a;
    iso.at(2 * d + 1, d) = -a;
  }
  const ZcaTransform zi = zca_fit(iso, 0.1);
  double id = 0.0;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      id = std::max(id, std::abs(zi.W.at(i, j) - (i == j ? 1.0 / std::sqrt(1.1) : 0.0)));

  const json emitted = emit_config(desk().cfg);
  const RunConfig parsed = parse_config_json(emitted);
  RunConfig expect = desk().cfg;
  expect.distill.arch.input_shape = parsed.distill.arch.input_shape;
  expect.distill.arch.classes = parsed.distill.arch.classes;
  const bool config = parsed == expect && emit_config(parsed) == emitted;

  return {ckpt && rt <= kZcaRoundTrip && id <= kZcaIdentity && config,
          std::string("checkpoint ") + (ckpt ? "bit-exact" : "MISMATCH") + ", ZCA round trip " +
              fmt(rt) + " (tol " + fmt(kZcaRoundTrip) + "), ZCA identity " + fmt(id) +
              " (tol " + fmt(kZcaIdentity) + "), config " + (config ? "exact" : "MISMATCH")};
}

// ---------------------------------------------------------------------------
// 11. End-to-end determinism through the CLI.

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "ratdd_acceptance_cli";
  fs::remove_all(root);
  fs::create_directories(root);
  auto run = [&](const std::string& id) {
    const std::string cmd = std::string(kOutputRootEnv) + "='" + root.string() + "' '" +
                            RATDD_CLI_PATH + "' distill --config '" + kDeskConfig +
                            "' --set run_id=" + id + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) && WEXITSTATUS(status) == 0;
  };
  if (!run("a") || !run("b")) return {false, "CLI distill failed"};
  const fs::path a = root / "runs" / "a", b = root / "runs" / "b";
  std::string compared;
  bool same = true;
  for (const char* f : {"distilled.ddc", "metrics.jsonl", "eval.json"}) {
    const std::string x = slurp(a / f), y = slurp(b / f);
    same &= !x.empty() && x == y;
    compared += std::string(" ") + f + "(" + std::to_string(x.size()) + " B)";
  }
  return {same, std::string(same ? "byte-identical:" : "DIFFER:") + compared};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "meta-gradient correctness", 10, meta_gradient_correctness},
      {2, "estimator equivalences", 10, estimator_equivalences},
      {3, "gradient stability direction", 900, gradient_stability},
      {4, "estimator ranking", 1800, estimator_ranking},
      {5, "distillation efficacy", 300, distillation_efficacy},
      {6, "boosting nesting", 1800, boosting_nesting},
      {7, "intercorrelation direction", 1800, intercorrelation},
      {8, "window-sampling uniformity", 60, window_uniformity},
      {9, "hardness suite", 30, hardness_suite},
      {10, "round trips", 60, round_trips},
      {11, "determinism", 300, determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.budget_s;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::printf("%s %2d %-30s %s [%.1fs / %.0fs%s]\n", pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs, c.budget_s, in_time ? "" : " OVER BUDGET");
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
