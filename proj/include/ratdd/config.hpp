// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

// Run configuration: JSON parsing with defaults, strict key checking and
// error messages that name the JSON path, plus the inverse emitter.

#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ratdd/boosting.hpp"
#include "ratdd/data.hpp"
#include "ratdd/driver.hpp"
#include "ratdd/errors.hpp"
#include "ratdd/estimators.hpp"
#include "ratdd/models.hpp"

namespace ratdd {

using json = nlohmann::json;

static_assert(std::is_same_v<std::uint64_t, std::size_t>,
              "seeds are read through the size_t overload");

enum class DataSource { synthetic, idx, csv };

struct DataConfig {
  DataSource source = DataSource::synthetic;
  SyntheticKind kind = SyntheticKind::gaussian_blobs;
  SyntheticParams synthetic{};
  std::uint64_t seed = 0;  // synthetic draw; part of the dataset's identity
  std::string train_images, train_labels, test_images, test_labels;
  std::string train_csv, test_csv;
  std::size_t classes = 0;  // 0: inferred from the labels
  bool zca = false;
  double zca_lambda = 0.1;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct BoostSection {
  std::size_t block_size = 0;  // 0: one point per class
  std::size_t blocks = 3;
  double beta = 0.0;
  std::size_t stage_steps = 300;
  bool continue_optimizer = false;

  friend bool operator==(const BoostSection&, const BoostSection&) = default;
};

struct HardnessSection {
  std::size_t epochs = 20;
  std::size_t batch = 64;
  std::size_t n_seeds = 10;
  std::size_t n_nets = 8;  // adaptive mode

  friend bool operator==(const HardnessSection&, const HardnessSection&) = default;
};

struct RunConfig {
  std::string run_id = "run";
  std::string output_dir = "runs";
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  DataConfig data{};
  // distill.seed mirrors `seed`; arch.input_shape and arch.classes are taken
  // from the data at load time and are not part of the file.
  DistillationConfig distill{};
  BoostSection boost{};
  HardnessSection hardness{};
  std::vector<Estimator> compare_estimators{Estimator::bptt, Estimator::tbptt,
                                            Estimator::rbptt, Estimator::ratbptt};
  std::vector<std::size_t> subsample_sizes{};

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// ---------------------------------------------------------------------------
// Enum names

namespace detail {

template <class E>
using NameTable = std::vector<std::pair<const char*, E>>;

inline const NameTable<DataSource>& names(DataSource) {
  static const NameTable<DataSource> t{{"synthetic", DataSource::synthetic},
                                       {"idx", DataSource::idx},
                                       {"csv", DataSource::csv}};
  return t;
}
inline const NameTable<SyntheticKind>& names(SyntheticKind) {
  static const NameTable<SyntheticKind> t{{"gaussian_blobs", SyntheticKind::gaussian_blobs},
                                          {"two_rings", SyntheticKind::two_rings},
                                          {"xor_grid", SyntheticKind::xor_grid}};
  return t;
}
inline const NameTable<ModelKind>& names(ModelKind) {
  static const NameTable<ModelKind> t{{"linear", ModelKind::linear},
                                      {"mlp", ModelKind::mlp},
                                      {"convnet", ModelKind::convnet}};
  return t;
}
inline const NameTable<Activation>& names(Activation) {
  static const NameTable<Activation> t{{"relu", Activation::relu},
                                       {"tanh", Activation::tanh}};
  return t;
}
inline const NameTable<Normalization>& names(Normalization) {
  static const NameTable<Normalization> t{{"none", Normalization::none},
                                          {"instance", Normalization::instance}};
  return t;
}
inline const NameTable<Estimator>& names(Estimator) {
  static const NameTable<Estimator> t{{"bptt", Estimator::bptt},
                                      {"tbptt", Estimator::tbptt},
                                      {"rbptt", Estimator::rbptt},
                                      {"ratbptt", Estimator::ratbptt}};
  return t;
}
inline const NameTable<ResamplePolicy>& names(ResamplePolicy) {
  static const NameTable<ResamplePolicy> t{
      {"per_outer_step", ResamplePolicy::per_outer_step},
      {"per_outer_epoch", ResamplePolicy::per_outer_epoch}};
  return t;
}
inline const NameTable<LossKind>& names(LossKind) {
  static const NameTable<LossKind> t{{"soft_ce", LossKind::soft_ce},
                                     {"mse", LossKind::mse}};
  return t;
}
inline const NameTable<InnerOptKind>& names(InnerOptKind) {
  static const NameTable<InnerOptKind> t{{"sgd", InnerOptKind::sgd},
                                         {"adam", InnerOptKind::adam}};
  return t;
}

template <class E>
std::string enum_name(E e) {
  for (const auto& [n, v] : names(E{}))
    if (v == e) return n;
  throw ContractError("enum_name: unnamed value");
}

template <class E>
E enum_from(const std::string& s, const std::string& path) {
  std::string options;
  for (const auto& [n, v] : names(E{})) {
    if (s == n) return v;
    options += options.empty() ? n : std::string(", ") + n;
  }
  throw ConfigError(path, "unknown value \"" + s + "\" (expected one of " + options + ")");
}

inline std::string join_path(const std::string& base, const std::string& key) {
  return base.empty() ? key : base + "." + key;
}

/// Reads one JSON object, tracking which keys were consumed.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object())
      throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  const std::string& path() const { return path_; }

  void read(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) mismatch(key, "a boolean");
      out = v->get<bool>();
    }
  }
  void read(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) mismatch(key, "a number");
      out = v->get<double>();
    }
  }
  void read(const char* key, std::size_t& out) {
    if (const json* v = take(key)) {
      if (!nonnegative_integer(*v)) mismatch(key, "a nonnegative integer");
      out = v->get<std::size_t>();
    }
  }
  void read(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) mismatch(key, "a string");
      out = v->get<std::string>();
    }
  }
  void read(const char* key, std::vector<std::size_t>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) mismatch(key, "an array of nonnegative integers");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        if (!nonnegative_integer((*v)[i]))
          throw ConfigError(join_path(path_, key) + "[" + std::to_string(i) + "]",
                            "expected a nonnegative integer");
        out.push_back((*v)[i].get<std::size_t>());
      }
    }
  }
  template <class E>
    requires std::is_enum_v<E>
  void read(const char* key, E& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) mismatch(key, "a string");
      out = enum_from<E>(v->get<std::string>(), join_path(path_, key));
    }
  }
  template <class E>
    requires std::is_enum_v<E>
  void read(const char* key, std::vector<E>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) mismatch(key, "an array of strings");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        const std::string p = join_path(path_, key) + "[" + std::to_string(i) + "]";
        if (!(*v)[i].is_string()) throw ConfigError(p, "expected a string");
        out.push_back(enum_from<E>((*v)[i].get<std::string>(), p));
      }
    }
  }

  /// Calls `fn(ObjectReader&)` on the sub-object `key` if present.
  template <class Fn>
  void object(const char* key, Fn&& fn) {
    if (const json* v = take(key)) {
      ObjectReader sub(*v, join_path(path_, key));
      fn(sub);
      sub.finish();
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(join_path(path_, k), "unknown key");
  }

 private:
  static bool nonnegative_integer(const json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
  }
  const json* take(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    return &*it;
  }
  [[noreturn]] void mismatch(const char* key, const char* expected) const {
    throw ConfigError(join_path(path_, key), std::string("type mismatch, expected ") + expected);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_opt(ObjectReader& r, InnerOptConfig& o) {
  r.read("kind", o.kind);
  r.read("lr", o.lr);
  r.read("beta1", o.beta1);
  r.read("beta2", o.beta2);
  r.read("eps", o.eps);
}

inline json emit_opt(const InnerOptConfig& o) {
  return {{"kind", enum_name(o.kind)}, {"lr", o.lr}, {"beta1", o.beta1},
          {"beta2", o.beta2}, {"eps", o.eps}};
}

inline json names_of(const std::vector<Estimator>& v) {
  json a = json::array();
  for (auto e : v) a.push_back(enum_name(e));
  return a;
}

inline void require(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw ConfigError(path, "constraint violated: " + what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Emit / parse

inline json emit_config(const RunConfig& c) {
  using detail::enum_name;
  const auto& d = c.data;
  const auto& a = c.distill.arch;
  const auto& u = c.distill.unroll;
  const auto& e = c.distill.eval;
  const auto& h = c.distill.hardness;
  return {
      {"run_id", c.run_id},
      {"output_dir", c.output_dir},
      {"seed", c.seed},
      {"jobs", c.jobs},
      {"data",
       {{"source", enum_name(d.source)},
        {"kind", enum_name(d.kind)},
        {"classes", d.classes},
        {"synthetic",
         {{"classes", d.synthetic.classes},
          {"train_per_class", d.synthetic.train_per_class},
          {"test_per_class", d.synthetic.test_per_class},
          {"dim", d.synthetic.dim},
          {"sigma", d.synthetic.sigma},
          {"radius", d.synthetic.radius}}},
        {"seed", d.seed},
        {"train_images", d.train_images},
        {"train_labels", d.train_labels},
        {"test_images", d.test_images},
        {"test_labels", d.test_labels},
        {"train_csv", d.train_csv},
        {"test_csv", d.test_csv},
        {"zca", d.zca},
        {"zca_lambda", d.zca_lambda}}},
      {"model",
       {{"kind", enum_name(a.kind)},
        {"hidden", a.hidden},
        {"activation", enum_name(a.activation)},
        {"norm", enum_name(a.norm)},
        {"norm_eps", a.norm_eps}}},
      {"unroll",
       {{"T", u.T},
        {"M", u.M},
        {"estimator", enum_name(u.estimator)},
        {"inner_opt", detail::emit_opt(u.inner_opt)},
        {"resample", enum_name(u.resample)},
        {"resample_every", u.resample_every},
        {"reset_state_at_window", u.reset_state_at_window},
        {"inner_batch", u.inner_batch},
        {"inner_loss", enum_name(u.inner_loss)},
        {"outer_loss", enum_name(u.outer_loss)},
        {"n_inits", u.n_inits},
        {"divergence_bound", u.divergence_bound}}},
      {"distill",
       {{"ipc", c.distill.ipc},
        {"outer_lr", c.distill.outer_lr},
        {"outer_steps", c.distill.outer_steps},
        {"target_batch", c.distill.target_batch},
        {"eval_every", c.distill.eval_every},
        {"learn_labels", c.distill.learn_labels},
        {"clip_factor", c.distill.clip_factor},
        {"ema_decay", c.distill.ema_decay},
        {"flip_augment", c.distill.flip_augment},
        {"hardness_sampler",
         {{"enabled", h.enabled},
          {"thr", h.thr},
          {"activation_step", h.activation_step},
          {"refresh_every", h.refresh_every},
          {"n_nets", h.n_nets},
          {"half_nets_center", h.half_nets_center}}}}},
      {"eval",
       {{"steps", e.train.steps},
        {"batch", e.train.batch},
        {"n_seeds", e.n_seeds},
        {"loss", enum_name(e.train.loss)},
        {"divergence_bound", e.train.divergence_bound},
        {"opt", detail::emit_opt(e.train.opt)}}},
      {"boost",
       {{"block_size", c.boost.block_size},
        {"blocks", c.boost.blocks},
        {"beta", c.boost.beta},
        {"stage_steps", c.boost.stage_steps},
        {"continue_optimizer", c.boost.continue_optimizer}}},
      {"hardness",
       {{"epochs", c.hardness.epochs},
        {"batch", c.hardness.batch},
        {"n_seeds", c.hardness.n_seeds},
        {"n_nets", c.hardness.n_nets}}},
      {"compare", {{"estimators", detail::names_of(c.compare_estimators)}}},
      {"subsample_sizes", c.subsample_sizes},
  };
}

/// Checks cross-field constraints; errors name the JSON path.
inline void validate_config(const RunConfig& c) {
  using detail::require;
  const auto& u = c.distill.unroll;
  require(c.jobs >= 1, "jobs", "jobs >= 1");
  require(u.T >= 1, "unroll.T", "T >= 1");
  require(u.M >= 1, "unroll.M", "M >= 1");
  require(u.M <= u.T, "unroll.M", "M ≤ T");
  require(u.n_inits >= 1, "unroll.n_inits", "n_inits >= 1");
  require(u.resample_every >= 1, "unroll.resample_every", "resample_every >= 1");
  require(u.divergence_bound > 0.0, "unroll.divergence_bound", "divergence_bound > 0");
  auto check_opt = [&](const InnerOptConfig& o, const std::string& p) {
    require(o.lr > 0.0, p + ".lr", "lr > 0");
    require(o.beta1 >= 0.0 && o.beta1 < 1.0, p + ".beta1", "0 <= beta1 < 1");
    require(o.beta2 >= 0.0 && o.beta2 < 1.0, p + ".beta2", "0 <= beta2 < 1");
    require(o.eps > 0.0, p + ".eps", "eps > 0");
  };
  check_opt(u.inner_opt, "unroll.inner_opt");
  check_opt(c.distill.eval.train.opt, "eval.opt");
  const auto& a = c.distill.arch;
  if (a.kind == ModelKind::linear)
    require(a.hidden.empty(), "model.hidden", "linear model has no hidden layers");
  else
    require(!a.hidden.empty(), "model.hidden", "at least one hidden layer");
  for (auto w : a.hidden) require(w >= 1, "model.hidden", "widths >= 1");
  require(a.norm_eps > 0.0, "model.norm_eps", "norm_eps > 0");
  require(a.norm == Normalization::none || a.kind == ModelKind::convnet, "model.norm",
          "instance norm requires the convnet");
  const auto& d = c.distill;
  require(d.ipc >= 1, "distill.ipc", "ipc >= 1");
  require(d.outer_lr > 0.0, "distill.outer_lr", "outer_lr > 0");
  require(d.target_batch >= 1, "distill.target_batch", "target_batch >= 1");
  require(d.eval_every >= 1, "distill.eval_every", "eval_every >= 1");
  require(d.clip_factor > 0.0, "distill.clip_factor", "clip_factor > 0");
  require(d.ema_decay > 0.0 && d.ema_decay < 1.0, "distill.ema_decay",
          "0 < ema_decay < 1");
  require(d.hardness.thr > 0.0, "distill.hardness_sampler.thr", "thr > 0");
  require(d.hardness.refresh_every >= 1, "distill.hardness_sampler.refresh_every",
          "refresh_every >= 1");
  require(d.hardness.n_nets >= 2, "distill.hardness_sampler.n_nets", "n_nets >= 2");
  require(d.eval.n_seeds >= 1, "eval.n_seeds", "n_seeds >= 1");
  require(d.eval.train.divergence_bound > 0.0, "eval.divergence_bound",
          "divergence_bound > 0");
  require(c.boost.blocks >= 1, "boost.blocks", "blocks >= 1");
  require(c.boost.beta >= 0.0 && c.boost.beta <= 1.0, "boost.beta", "0 <= beta <= 1");
  require(c.hardness.epochs >= 1, "hardness.epochs", "epochs >= 1");
  require(c.hardness.n_seeds >= 1, "hardness.n_seeds", "n_seeds >= 1");
  require(c.hardness.n_nets >= 2, "hardness.n_nets", "n_nets >= 2");
  require(!c.compare_estimators.empty(), "compare.estimators", "at least one estimator");
  const auto& s = c.data.synthetic;
  require(s.classes >= 2, "data.synthetic.classes", "classes >= 2");
  require(s.dim >= 2, "data.synthetic.dim", "dim >= 2");
  require(s.train_per_class >= 1 && s.test_per_class >= 1, "data.synthetic",
          "at least one example per class");
  require(c.data.zca_lambda >= 0.0, "data.zca_lambda", "zca_lambda >= 0");
  require(!c.run_id.empty() && c.run_id.find('/') == std::string::npos, "run_id",
          "nonempty, without '/'");
  if (c.data.source == DataSource::idx)
    require(!c.data.train_images.empty() && !c.data.train_labels.empty() &&
                !c.data.test_images.empty() && !c.data.test_labels.empty(),
            "data", "idx source needs train/test image and label paths");
  if (c.data.source == DataSource::csv)
    require(!c.data.train_csv.empty() && !c.data.test_csv.empty(), "data",
            "csv source needs train_csv and test_csv");
}

inline RunConfig parse_config_json(const json& root) {
  RunConfig c;
  detail::ObjectReader r(root, "");
  r.read("run_id", c.run_id);
  r.read("output_dir", c.output_dir);
  r.read("seed", c.seed);
  r.read("jobs", c.jobs);
  r.object("data", [&](detail::ObjectReader& o) {
    auto& d = c.data;
    o.read("source", d.source);
    o.read("kind", d.kind);
    o.read("classes", d.classes);
    o.object("synthetic", [&](detail::ObjectReader& s) {
      s.read("classes", d.synthetic.classes);
      s.read("train_per_class", d.synthetic.train_per_class);
      s.read("test_per_class", d.synthetic.test_per_class);
      s.read("dim", d.synthetic.dim);
      s.read("sigma", d.synthetic.sigma);
      s.read("radius", d.synthetic.radius);
    });
    o.read("seed", d.seed);
    o.read("train_images", d.train_images);
    o.read("train_labels", d.train_labels);
    o.read("test_images", d.test_images);
    o.read("test_labels", d.test_labels);
    o.read("train_csv", d.train_csv);
    o.read("test_csv", d.test_csv);
    o.read("zca", d.zca);
    o.read("zca_lambda", d.zca_lambda);
  });
  r.object("model", [&](detail::ObjectReader& o) {
    auto& a = c.distill.arch;
    o.read("kind", a.kind);
    o.read("hidden", a.hidden);
    o.read("activation", a.activation);
    o.read("norm", a.norm);
    o.read("norm_eps", a.norm_eps);
  });
  r.object("unroll", [&](detail::ObjectReader& o) {
    auto& u = c.distill.unroll;
    o.read("T", u.T);
    o.read("M", u.M);
    o.read("estimator", u.estimator);
    o.object("inner_opt", [&](detail::ObjectReader& p) { detail::read_opt(p, u.inner_opt); });
    o.read("resample", u.resample);
    o.read("resample_every", u.resample_every);
    o.read("reset_state_at_window", u.reset_state_at_window);
    o.read("inner_batch", u.inner_batch);
    o.read("inner_loss", u.inner_loss);
    o.read("outer_loss", u.outer_loss);
    o.read("n_inits", u.n_inits);
    o.read("divergence_bound", u.divergence_bound);
  });
  r.object("distill", [&](detail::ObjectReader& o) {
    auto& d = c.distill;
    o.read("ipc", d.ipc);
    o.read("outer_lr", d.outer_lr);
    o.read("outer_steps", d.outer_steps);
    o.read("target_batch", d.target_batch);
    o.read("eval_every", d.eval_every);
    o.read("learn_labels", d.learn_labels);
    o.read("clip_factor", d.clip_factor);
    o.read("ema_decay", d.ema_decay);
    o.read("flip_augment", d.flip_augment);
    o.object("hardness_sampler", [&](detail::ObjectReader& h) {
      h.read("enabled", d.hardness.enabled);
      h.read("thr", d.hardness.thr);
      h.read("activation_step", d.hardness.activation_step);
      h.read("refresh_every", d.hardness.refresh_every);
      h.read("n_nets", d.hardness.n_nets);
      h.read("half_nets_center", d.hardness.half_nets_center);
    });
  });
  r.object("eval", [&](detail::ObjectReader& o) {
    auto& e = c.distill.eval;
    o.read("steps", e.train.steps);
    o.read("batch", e.train.batch);
    o.read("n_seeds", e.n_seeds);
    o.read("loss", e.train.loss);
    o.read("divergence_bound", e.train.divergence_bound);
    o.object("opt", [&](detail::ObjectReader& p) { detail::read_opt(p, e.train.opt); });
  });
  r.object("boost", [&](detail::ObjectReader& o) {
    o.read("block_size", c.boost.block_size);
    o.read("blocks", c.boost.blocks);
    o.read("beta", c.boost.beta);
    o.read("stage_steps", c.boost.stage_steps);
    o.read("continue_optimizer", c.boost.continue_optimizer);
  });
  r.object("hardness", [&](detail::ObjectReader& o) {
    o.read("epochs", c.hardness.epochs);
    o.read("batch", c.hardness.batch);
    o.read("n_seeds", c.hardness.n_seeds);
    o.read("n_nets", c.hardness.n_nets);
  });
  r.object("compare", [&](detail::ObjectReader& o) {
    o.read("estimators", c.compare_estimators);
  });
  r.read("subsample_sizes", c.subsample_sizes);
  r.finish();
  c.distill.seed = c.seed;
  c.distill.eval.jobs = c.jobs;
  validate_config(c);
  return c;
}

/// Applies "a.b.c=value". The value is read as JSON when it parses as JSON
/// and as a plain string otherwise.
inline void apply_override(json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError(assignment, "override must look like key.path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) throw ConfigError(path, "empty path component");
    if (!node->is_object()) throw ConfigError(path, "cannot descend into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  json j = json::parse(ss.str(), nullptr, false);
  if (j.is_discarded()) throw ConfigError(path, "not a valid JSON document");
  return j;
}

/// Reads `path`, applies overrides, fills defaults and validates.
inline RunConfig parse_config(const std::string& path,
                              const std::vector<std::string>& overrides = {}) {
  json j = read_json_file(path);
  for (const auto& o : overrides) apply_override(j, o);
  return parse_config_json(j);
}

}  // namespace ratdd
