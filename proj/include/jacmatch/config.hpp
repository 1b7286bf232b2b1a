#pragma once

// Experiment configuration: flat `section.key = value` text, `#` starts a comment,
// lists are comma separated. Unknown or repeated keys are errors. Finetune variants
// are named in `finetune.variants`; each can be adjusted with `variant.<name>.<key>`.

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "jacmatch/checkpoint.hpp"
#include "jacmatch/data.hpp"
#include "jacmatch/losses.hpp"
#include "jacmatch/pruning.hpp"

namespace jacmatch {

struct VariantConfig {
  std::string name;
  LossWeights weights;
  long steps = -1;   // -1: use finetune.steps
  double lr = -1.0;  // -1: use finetune.lr

  bool operator==(const VariantConfig&) const = default;
};

/// Weights of the built-in variants. Unknown names start from the LossWeights defaults.
inline LossWeights preset_weights(const std::string& name) {
  LossWeights w;
  if (name == "np" || name == "baseline") {
    w.lambda_kd = 0.0;
    w.lambda_jac = 0.0;
  } else if (name == "kd") {
    w.lambda_jac = 0.0;
  } else if (name == "1stjm") {
    w.lambda_jac = 0.0;
    w.enable_first_jac = true;
    w.lambda_first_jac = 0.1;
  } else if (name == "2ndm") {
    w.lambda_jac = 0.1;
  }
  return w;
}

struct ExperimentConfig {
  DatasetKind dataset = DatasetKind::gmm_ring8;
  std::size_t n_train = 10000;
  std::size_t n_holdout = 10000;

  Architecture arch;
  ScheduleConfig schedule;

  long dense_steps = 5000;
  double dense_lr = 1e-3;
  std::size_t dense_batch = 256;
  double dense_ema = 0.0;  // weight averaging decay for the teacher, 0 = off

  std::vector<PruneMethod> prune_methods{PruneMethod::magnitude};
  std::vector<double> prune_ratios{0.5};
  std::size_t calib_size = 1024;

  long finetune_steps = 2000;
  double finetune_lr = 3e-4;
  std::size_t finetune_batch = 256;
  std::vector<VariantConfig> variants{{"np", preset_weights("np")}, {"kd", preset_weights("kd")},
                                      {"2ndm", preset_weights("2ndm")}};

  std::size_t eval_samples = 10000;
  std::size_t sw_projections = 128;
  double mmd_bandwidth = 0.0;  // 0: median heuristic on the held-out set
  std::size_t sm_samples = 10000;
  int sm_t = -1;  // -1: T / 2
  std::size_t ftle_points = 128;
  int ftle_t_start = -1;  // -1: T - 1
  int ftle_k = 10;
  int ftle_max_iters = 50;
  double ftle_tol = 1e-6;
  std::size_t kd_eval_batch = 1024;

  std::vector<std::uint64_t> seeds{0};
  std::string out_dir = "out";
  bool write_samples = true;

  int resolved_sm_t() const { return sm_t < 0 ? schedule.T / 2 : sm_t; }
  int resolved_ftle_t_start() const { return ftle_t_start < 0 ? schedule.T - 1 : ftle_t_start; }

  long steps_of(const VariantConfig& v) const { return v.steps < 0 ? finetune_steps : v.steps; }
  double lr_of(const VariantConfig& v) const { return v.lr < 0 ? finetune_lr : v.lr; }

  void validate() const {
    if (n_train < 1 || n_holdout < 2) throw Error("dataset sizes too small");
    if (arch.hidden_widths.empty()) throw Error("model.hidden_widths must not be empty");
    if (arch.time_embed_dim % 2) throw Error("model.time_embed_dim must be even");
    schedule.make();
    if (dense_steps < 0 || finetune_steps < 0) throw Error("step counts must be non-negative");
    if (!(dense_lr > 0) || !(finetune_lr > 0)) throw Error("learning rates must be positive");
    if (dense_batch < 1 || finetune_batch < 1) throw Error("batch sizes must be positive");
    if (!(dense_ema >= 0.0 && dense_ema < 1.0)) throw Error("dense.ema must be in [0, 1)");
    if (prune_methods.empty() || prune_ratios.empty()) throw Error("prune.methods and prune.ratios must not be empty");
    for (double r : prune_ratios)
      if (!(r > 0 && r < 1)) throw Error("prune ratios must lie in (0, 1)");
    if (calib_size < 1) throw Error("prune.calib_size must be positive");
    if (variants.empty()) throw Error("finetune.variants must not be empty");
    for (std::size_t i = 0; i < variants.size(); ++i) {
      variants[i].weights.validate();
      for (std::size_t j = 0; j < i; ++j)
        if (variants[j].name == variants[i].name) throw Error("variant '" + variants[i].name + "' listed twice");
    }
    if (eval_samples < 2 || sm_samples < 1 || sw_projections < 1 || ftle_points < 1 || kd_eval_batch < 1) {
      throw Error("evaluation sizes must be positive");
    }
    if (mmd_bandwidth < 0) throw Error("eval.mmd_bandwidth must be non-negative");
    FlowMapSpec{resolved_ftle_t_start(), ftle_k}.validate(schedule.make());
    if (resolved_sm_t() >= schedule.T) throw Error("eval.sm_t outside the schedule");
    if (ftle_max_iters < 1 || !(ftle_tol > 0)) throw Error("invalid power iteration settings");
    if (seeds.empty()) throw Error("run.seeds must not be empty");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double d;
  try {
    d = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw Error(key + ": expected a number, got '" + v + "'");
  }
  if (pos != v.size()) throw Error(key + ": expected a number, got '" + v + "'");
  return d;
}

inline long long to_int(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  long long i;
  try {
    i = std::stoll(v, &pos);
  } catch (const std::exception&) {
    throw Error(key + ": expected an integer, got '" + v + "'");
  }
  if (pos != v.size()) throw Error(key + ": expected an integer, got '" + v + "'");
  return i;
}

inline std::size_t to_size(const std::string& key, const std::string& v) {
  const long long i = to_int(key, v);
  if (i < 0) throw Error(key + ": must be non-negative");
  return static_cast<std::size_t>(i);
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(key + ": expected true or false, got '" + v + "'");
}

/// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T, class F>
std::string join(const std::vector<T>& v, F f) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + f(v[i]);
  return s;
}

}  // namespace detail

using ConfigEntries = std::vector<std::pair<std::string, std::string>>;

inline ConfigEntries parse_config_entries(const std::string& text) {
  ConfigEntries out;
  std::map<std::string, int> seen;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected 'key = value'");
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw Error("config line " + std::to_string(lineno) + ": empty key");
    if (seen.count(key)) throw Error("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    seen[key] = lineno;
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

inline ExperimentConfig parse_config(const std::string& text) {
  using namespace detail;
  ExperimentConfig c;
  const ConfigEntries entries = parse_config_entries(text);

  // variant list first, so per-variant keys can be checked against it
  std::map<std::string, std::size_t> variant_index;
  for (const auto& [k, v] : entries) {
    if (k != "finetune.variants") continue;
    c.variants.clear();
    for (const auto& name : split_list(v)) c.variants.push_back({name, preset_weights(name)});
  }
  for (std::size_t i = 0; i < c.variants.size(); ++i) variant_index[c.variants[i].name] = i;

  for (const auto& [k, v] : entries) {
    if (k == "finetune.variants") continue;
    if (k == "dataset.kind") c.dataset = parse_dataset_kind(v);
    else if (k == "dataset.n_train") c.n_train = to_size(k, v);
    else if (k == "dataset.n_holdout") c.n_holdout = to_size(k, v);
    else if (k == "model.hidden_widths") {
      c.arch.hidden_widths.clear();
      for (const auto& w : split_list(v)) {
        const auto n = to_size(k, w);
        if (n == 0) throw Error(k + ": widths must be positive");
        c.arch.hidden_widths.push_back(n);
      }
    } else if (k == "model.time_embed_dim") c.arch.time_embed_dim = to_size(k, v);
    else if (k == "model.activation") c.arch.activation = parse_activation(v);
    else if (k == "schedule.kind") c.schedule.kind = parse_schedule_kind(v);
    else if (k == "schedule.T") c.schedule.T = static_cast<int>(to_int(k, v));
    else if (k == "schedule.beta_min") c.schedule.beta_min = to_double(k, v);
    else if (k == "schedule.beta_max") c.schedule.beta_max = to_double(k, v);
    else if (k == "dense.steps") c.dense_steps = static_cast<long>(to_int(k, v));
    else if (k == "dense.lr") c.dense_lr = to_double(k, v);
    else if (k == "dense.batch_size") c.dense_batch = to_size(k, v);
    else if (k == "dense.ema") c.dense_ema = to_double(k, v);
    else if (k == "prune.methods") {
      c.prune_methods.clear();
      for (const auto& m : split_list(v)) c.prune_methods.push_back(parse_prune_method(m));
    } else if (k == "prune.ratios") {
      c.prune_ratios.clear();
      for (const auto& r : split_list(v)) c.prune_ratios.push_back(to_double(k, r));
    } else if (k == "prune.calib_size") c.calib_size = to_size(k, v);
    else if (k == "finetune.steps") c.finetune_steps = static_cast<long>(to_int(k, v));
    else if (k == "finetune.lr") c.finetune_lr = to_double(k, v);
    else if (k == "finetune.batch_size") c.finetune_batch = to_size(k, v);
    else if (k == "eval.samples") c.eval_samples = to_size(k, v);
    else if (k == "eval.sw_projections") c.sw_projections = to_size(k, v);
    else if (k == "eval.mmd_bandwidth") c.mmd_bandwidth = v == "median" ? 0.0 : to_double(k, v);
    else if (k == "eval.sm_samples") c.sm_samples = to_size(k, v);
    else if (k == "eval.sm_t") c.sm_t = static_cast<int>(to_int(k, v));
    else if (k == "eval.ftle_points") c.ftle_points = to_size(k, v);
    else if (k == "eval.ftle_t_start") c.ftle_t_start = static_cast<int>(to_int(k, v));
    else if (k == "eval.ftle_k") c.ftle_k = static_cast<int>(to_int(k, v));
    else if (k == "eval.ftle_max_iters") c.ftle_max_iters = static_cast<int>(to_int(k, v));
    else if (k == "eval.ftle_tol") c.ftle_tol = to_double(k, v);
    else if (k == "eval.kd_batch") c.kd_eval_batch = to_size(k, v);
    else if (k == "eval.write_samples") c.write_samples = to_bool(k, v);
    else if (k == "run.seeds") {
      c.seeds.clear();
      for (const auto& s : split_list(v)) c.seeds.push_back(static_cast<std::uint64_t>(to_size(k, s)));
    } else if (k == "run.out_dir") c.out_dir = v;
    else if (k.rfind("variant.", 0) == 0) {
      const auto dot = k.find('.', 8);
      if (dot == std::string::npos) throw Error("unknown config key '" + k + "'");
      const std::string name = k.substr(8, dot - 8);
      const std::string field = k.substr(dot + 1);
      const auto it = variant_index.find(name);
      if (it == variant_index.end()) throw Error(k + ": variant '" + name + "' is not listed in finetune.variants");
      VariantConfig& var = c.variants[it->second];
      if (field == "lambda_np") var.weights.lambda_np = to_double(k, v);
      else if (field == "lambda_kd") var.weights.lambda_kd = to_double(k, v);
      else if (field == "lambda_jac") var.weights.lambda_jac = to_double(k, v);
      else if (field == "n_probes") var.weights.n_probes = to_size(k, v);
      else if (field == "enable_first_jac") var.weights.enable_first_jac = to_bool(k, v);
      else if (field == "lambda_first_jac") var.weights.lambda_first_jac = to_double(k, v);
      else if (field == "steps") var.steps = static_cast<long>(to_int(k, v));
      else if (field == "lr") var.lr = to_double(k, v);
      else throw Error("unknown config key '" + k + "'");
    } else {
      throw Error("unknown config key '" + k + "'");
    }
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

/// Every setting as explicit key/value pairs; parse_config(render_config(c)) reproduces c.
inline ConfigEntries config_entries(const ExperimentConfig& c) {
  using namespace detail;
  ConfigEntries e;
  auto add = [&](std::string k, std::string v) { e.emplace_back(std::move(k), std::move(v)); };
  auto num = [](auto v) { return std::to_string(v); };
  add("dataset.kind", to_string(c.dataset));
  add("dataset.n_train", num(c.n_train));
  add("dataset.n_holdout", num(c.n_holdout));
  add("model.hidden_widths", join(c.arch.hidden_widths, [](std::size_t w) { return std::to_string(w); }));
  add("model.time_embed_dim", num(c.arch.time_embed_dim));
  add("model.activation", to_string(c.arch.activation));
  add("schedule.kind", to_string(c.schedule.kind));
  add("schedule.T", num(c.schedule.T));
  add("schedule.beta_min", fmt_double(c.schedule.beta_min));
  add("schedule.beta_max", fmt_double(c.schedule.beta_max));
  add("dense.steps", num(c.dense_steps));
  add("dense.lr", fmt_double(c.dense_lr));
  add("dense.batch_size", num(c.dense_batch));
  add("dense.ema", fmt_double(c.dense_ema));
  add("prune.methods", join(c.prune_methods, [](PruneMethod m) { return to_string(m); }));
  add("prune.ratios", join(c.prune_ratios, [](double r) { return fmt_double(r); }));
  add("prune.calib_size", num(c.calib_size));
  add("finetune.steps", num(c.finetune_steps));
  add("finetune.lr", fmt_double(c.finetune_lr));
  add("finetune.batch_size", num(c.finetune_batch));
  add("finetune.variants", join(c.variants, [](const VariantConfig& v) { return v.name; }));
  for (const auto& v : c.variants) {
    const std::string p = "variant." + v.name + ".";
    add(p + "lambda_np", fmt_double(v.weights.lambda_np));
    add(p + "lambda_kd", fmt_double(v.weights.lambda_kd));
    add(p + "lambda_jac", fmt_double(v.weights.lambda_jac));
    add(p + "n_probes", num(v.weights.n_probes));
    add(p + "enable_first_jac", v.weights.enable_first_jac ? "true" : "false");
    add(p + "lambda_first_jac", fmt_double(v.weights.lambda_first_jac));
    add(p + "steps", num(v.steps));
    add(p + "lr", fmt_double(v.lr));
  }
  add("eval.samples", num(c.eval_samples));
  add("eval.sw_projections", num(c.sw_projections));
  add("eval.mmd_bandwidth", c.mmd_bandwidth == 0.0 ? "median" : fmt_double(c.mmd_bandwidth));
  add("eval.sm_samples", num(c.sm_samples));
  add("eval.sm_t", num(c.sm_t));
  add("eval.ftle_points", num(c.ftle_points));
  add("eval.ftle_t_start", num(c.ftle_t_start));
  add("eval.ftle_k", num(c.ftle_k));
  add("eval.ftle_max_iters", num(c.ftle_max_iters));
  add("eval.ftle_tol", fmt_double(c.ftle_tol));
  add("eval.kd_batch", num(c.kd_eval_batch));
  add("eval.write_samples", c.write_samples ? "true" : "false");
  add("run.seeds", join(c.seeds, [](std::uint64_t s) { return std::to_string(s); }));
  add("run.out_dir", c.out_dir);
  return e;
}

inline std::string render_config(const ExperimentConfig& c) {
  std::string s;
  for (const auto& [k, v] : config_entries(c)) s += k + " = " + v + "\n";
  return s;
}

}  // namespace jacmatch
