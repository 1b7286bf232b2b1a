#pragma once

// Evaluation of trained models and the full train -> prune -> finetune -> evaluate pipeline.
// report.json holds only quantities fixed by (config, seeds); wall-clock goes to timings.json.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "jacmatch/checkpoint.hpp"
#include "jacmatch/config.hpp"
#include "jacmatch/data.hpp"
#include "jacmatch/ftle.hpp"
#include "jacmatch/metrics.hpp"
#include "jacmatch/pruning.hpp"
#include "jacmatch/training.hpp"

namespace jacmatch {

using Json = nlohmann::ordered_json;

inline constexpr std::uint64_t kStreamEvalNoise = 0x6576616cULL;
inline constexpr std::uint64_t kStreamFtlePoints = 0x66746c65ULL;
inline constexpr std::uint64_t kStreamKdBatch = 0x6b64ULL;
inline constexpr std::uint64_t kStreamCalib = 0x63616c6962ULL;
inline constexpr std::uint64_t kStreamPruneSeed = 0x7072756eULL;
inline constexpr std::uint64_t kStreamSliced = 0x736c6963ULL;
inline constexpr std::uint64_t kStreamSme = 0x736d65ULL;

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// Everything an evaluation needs that is shared by all models of one seed.
struct EvalContext {
  NoiseSchedule schedule;
  std::uint64_t seed = 0;
  MmdReference reference;
  Tensor x_T;
  Tensor ftle_x;
  NoisyBatch kd_batch;
  bool has_mixture = false;
  GaussianMixture mixture;
  std::size_t sw_projections = 128;
  int sm_t = 0;
  std::size_t sm_samples = 0;
  FlowMapSpec ftle_spec;
  PowerIterationOptions ftle_opt;
};

inline Tensor holdout_set(const ExperimentConfig& c, std::uint64_t seed) {
  return sample_dataset(c.dataset, c.n_holdout, derive_seed(seed, {kStreamHoldout})).points;
}

inline Tensor train_set(const ExperimentConfig& c, std::uint64_t seed) {
  return sample_dataset(c.dataset, c.n_train, seed).points;
}

inline EvalContext make_eval_context(const ExperimentConfig& c, std::uint64_t seed, const Tensor& holdout) {
  EvalContext ctx;
  ctx.schedule = c.schedule.make();
  ctx.seed = seed;
  const double h = c.mmd_bandwidth > 0 ? c.mmd_bandwidth : median_heuristic_bandwidth(holdout);
  ctx.reference = make_mmd_reference(holdout, h);
  const std::size_t d = holdout.cols();
  Rng noise = make_rng(seed, {kStreamEvalNoise});
  ctx.x_T = randn(Shape{c.eval_samples, d}, noise);
  // x at t = T - 1 is close to N(0, I) for the schedules used here
  Rng fp = make_rng(seed, {kStreamFtlePoints});
  ctx.ftle_x = randn(Shape{c.ftle_points, d}, fp);
  Rng kd = make_rng(seed, {kStreamKdBatch});
  ctx.kd_batch = perturb(draw_noise_batch(holdout, c.kd_eval_batch, ctx.schedule.T, kd), ctx.schedule);
  ctx.has_mixture = analytic_mixture(c.dataset, ctx.mixture);
  ctx.sw_projections = c.sw_projections;
  ctx.sm_t = c.resolved_sm_t();
  ctx.sm_samples = c.sm_samples;
  ctx.ftle_spec = FlowMapSpec{c.resolved_ftle_t_start(), c.ftle_k};
  ctx.ftle_opt = PowerIterationOptions{c.ftle_max_iters, c.ftle_tol, derive_seed(seed, {kStreamFtlePoints, 1})};
  return ctx;
}

struct EvalRecord {
  double mmd = kNaN;
  double sw = kNaN;
  double sme = kNaN;
  double sme_se = kNaN;
  double ftle = kNaN;
  double ftle_se = kNaN;
  std::size_t ftle_used = 0;
  std::size_t ftle_nonconverged = 0;
  double ftle_gap = kNaN;
  double kd_loss = kNaN;
  std::size_t params = 0;
  std::size_t macs = 0;
  std::vector<FtleEstimate> ftle_points;
  Tensor samples;
};

/// FTLE of the model's flow map at the context's points.
inline std::vector<FtleEstimate> model_ftle(const ScoreNetwork& model, const EvalContext& ctx) {
  return flow_ftle(bind(model), ctx.schedule, ctx.ftle_spec, ctx.ftle_x, ctx.ftle_opt);
}

/// Metrics of `model` against the held-out data and `teacher`. Pass the teacher's own record to
/// avoid recomputing its FTLE.
inline EvalRecord evaluate(const ScoreNetwork& model, const ScoreNetwork& teacher, const EvalContext& ctx,
                           const EvalRecord* teacher_record = nullptr) {
  EvalRecord r;
  const auto bm = bind(model);
  r.params = param_count(model);
  r.macs = mac_count(model);
  r.samples = sample_ddim(bm, ctx.schedule, ctx.x_T);
  require_finite(r.samples, "generated samples");
  r.mmd = mmd_rbf(r.samples, ctx.reference);
  r.sw = sliced_wasserstein(r.samples, ctx.reference.points, ctx.sw_projections, derive_seed(ctx.seed, {kStreamSliced}));
  if (ctx.has_mixture) {
    const auto sme = score_matching_error(bm, ctx.mixture, ctx.schedule, ctx.sm_t, ctx.sm_samples,
                                          derive_seed(ctx.seed, {kStreamSme}));
    r.sme = sme.mean;
    r.sme_se = sme.std_error;
  }
  r.ftle_points = model_ftle(model, ctx);
  const FtleAverage fa = average_ftle(r.ftle_points);
  r.ftle = fa.mean;
  r.ftle_se = fa.std_error;
  r.ftle_used = fa.n_used;
  r.ftle_nonconverged = fa.n_nonconverged;
  const bool self = &model == &teacher || (model.arch == teacher.arch && model.params == teacher.params &&
                                           model.masks == teacher.masks);
  double teacher_ftle = r.ftle;
  if (teacher_record) teacher_ftle = teacher_record->ftle;
  else if (!self) teacher_ftle = average_ftle(model_ftle(teacher, ctx)).mean;
  r.ftle_gap = std::abs(r.ftle - teacher_ftle);
  r.kd_loss = loss_kd(bm, bind(teacher), ctx.kd_batch.xt, ctx.kd_batch.t).item();
  return r;
}

// ---------------------------------------------------------------------------
// JSON records

inline Json json_number(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline double number_or_nan(const Json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return kNaN;
  return j.at(key).get<double>();
}

inline Json ftle_records_json(const std::vector<FtleEstimate>& est) {
  Json a = Json::array();
  for (const auto& e : est) {
    a.push_back({{"x0_hash", hash_point(e.x0)},
                 {"t_start", e.t_start},
                 {"k", e.k},
                 {"lambda_max", json_number(e.lambda_max)},
                 {"ftle", json_number(e.ftle)},
                 {"converged", e.converged},
                 {"iterations", e.iterations}});
  }
  return a;
}

inline Json metrics_json(const EvalRecord& r) {
  return {{"mmd", json_number(r.mmd)},
          {"sliced_wasserstein", json_number(r.sw)},
          {"score_matching_error", json_number(r.sme)},
          {"score_matching_error_se", json_number(r.sme_se)},
          {"ftle", json_number(r.ftle)},
          {"ftle_se", json_number(r.ftle_se)},
          {"ftle_used", r.ftle_used},
          {"ftle_nonconverged", r.ftle_nonconverged},
          {"ftle_gap", json_number(r.ftle_gap)},
          {"kd_loss", json_number(r.kd_loss)},
          {"params", r.params},
          {"macs", r.macs}};
}

inline Json loss_json(const LossLogRow& l) {
  return {{"total", json_number(l.total)},
          {"np", json_number(l.np)},
          {"kd", json_number(l.kd)},
          {"jac", json_number(l.jac)},
          {"first_jac", json_number(l.first_jac)}};
}

inline Json weights_json(const LossWeights& w) {
  return {{"lambda_np", w.lambda_np},
          {"lambda_kd", w.lambda_kd},
          {"lambda_jac", w.lambda_jac},
          {"n_probes", w.n_probes},
          {"enable_first_jac", w.enable_first_jac},
          {"lambda_first_jac", w.lambda_first_jac}};
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Error("cannot write " + p.string());
  f << s;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw Error("cannot open " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// Last data row of a loss CSV written by write_loss_csv.
inline LossLogRow read_last_loss_row(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw Error("cannot open " + p.string());
  std::string line, last;
  std::getline(f, line);
  while (std::getline(f, line))
    if (!line.empty()) last = line;
  LossLogRow r;
  r.total = r.np = r.kd = r.jac = r.first_jac = kNaN;
  if (last.empty()) return r;
  std::vector<std::string> cells;
  std::stringstream ss(last);
  std::string c;
  while (std::getline(ss, c, ',')) cells.push_back(c);
  if (cells.size() < 7) throw Error("malformed loss CSV " + p.string());
  r.step = std::stol(cells[0]);
  r.total = std::stod(cells[1]);
  r.np = std::stod(cells[2]);
  r.kd = std::stod(cells[3]);
  r.jac = std::stod(cells[4]);
  r.probe_seed = std::stoull(cells[5]);
  r.first_jac = std::stod(cells[6]);
  return r;
}

// ---------------------------------------------------------------------------
// Pipeline

struct RunOptions {
  bool resume = false;
  std::ostream* log = nullptr;  // progress lines; null for silence
};

inline std::string ratio_tag(double r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", r);
  return buf;
}

inline std::string group_dir(PruneMethod m, double ratio) { return to_string(m) + "_r" + ratio_tag(ratio); }

struct Stopwatch {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); }
};

namespace detail {

inline void say(const RunOptions& o, const std::string& s) {
  if (o.log) *o.log << s << std::endl;
}

inline std::vector<std::size_t> surviving_widths(const ScoreNetwork& net) {
  std::vector<std::size_t> w;
  for (std::size_t l = 0; l < net.arch.hidden_widths.size(); ++l) w.push_back(net.active_width(l));
  return w;
}

/// Loads the dense checkpoint if it exists and matches the config.
inline bool try_resume_dense(const std::filesystem::path& ckpt, const ExperimentConfig& c, ScoreNetwork& out) {
  if (!std::filesystem::exists(ckpt)) return false;
  Checkpoint ck = load_checkpoint(ckpt.string());
  if (!(ck.net.arch == c.arch) || !(ck.schedule == c.schedule)) {
    throw Error("existing " + ckpt.string() + " does not match the config; remove it or drop --resume");
  }
  out = std::move(ck.net);
  return true;
}

}  // namespace detail

/// One seed of the pipeline. Returns the seed's report object; stage timings go to `timings`.
inline Json run_seed(const ExperimentConfig& c, std::uint64_t seed, const std::filesystem::path& out,
                     const RunOptions& opt, Json& timings) {
  namespace fs = std::filesystem;
  const fs::path dir = out / ("seed_" + std::to_string(seed));
  fs::create_directories(dir);
  const NoiseSchedule s = c.schedule.make();
  Json seed_json;
  seed_json["seed"] = seed;
  timings = Json::object();

  Stopwatch sw;
  const Tensor train = train_set(c, seed);
  const Tensor holdout = holdout_set(c, seed);
  write_points_csv((dir / "train.csv").string(), train);
  write_points_csv((dir / "holdout.csv").string(), holdout);
  const EvalContext ctx = make_eval_context(c, seed, holdout);
  seed_json["mmd_bandwidth"] = ctx.reference.bandwidth;
  timings["data"] = sw.seconds();

  // dense teacher
  sw = Stopwatch{};
  ScoreNetwork dense;
  Json dense_json;
  LossLogRow dense_final;
  bool resumed = opt.resume && detail::try_resume_dense(dir / "dense.ckpt", c, dense);
  try {
    if (resumed) {
      detail::say(opt, "seed " + std::to_string(seed) + ": reusing dense checkpoint");
      dense_final = fs::exists(dir / "dense_loss.csv") ? read_last_loss_row(dir / "dense_loss.csv") : LossLogRow{};
    } else {
      detail::say(opt, "seed " + std::to_string(seed) + ": training dense teacher");
      TrainResult tr = train_dense(c, train, seed);
      dense = std::move(tr.net);
      save_checkpoint((dir / "dense.ckpt").string(), {dense, c.schedule});
      write_loss_csv((dir / "dense_loss.csv").string(), tr.log);
      if (!tr.log.empty()) dense_final = tr.log.back();
    }
    dense_json["status"] = "ok";
  } catch (const DivergenceError& e) {
    dense_json["status"] = "diverged";
    dense_json["error"] = e.what();
  }
  timings["dense_train"] = sw.seconds();

  const bool dense_ok = dense_json["status"] == "ok";
  EvalRecord dense_eval;
  if (dense_ok) {
    sw = Stopwatch{};
    dense_eval = evaluate(dense, dense, ctx);
    dense_json["final_loss"] = loss_json(dense_final);
    dense_json["metrics"] = metrics_json(dense_eval);
    write_text(dir / "dense_ftle.json", ftle_records_json(dense_eval.ftle_points).dump(1) + "\n");
    if (c.write_samples) write_points_csv((dir / "dense_samples.csv").string(), dense_eval.samples);
    timings["dense_eval"] = sw.seconds();
  }
  seed_json["dense"] = dense_json;

  Json pruning = Json::array();
  Json results = Json::array();
  Json groups_t = Json::object();
  for (PruneMethod m : c.prune_methods) {
    ImportanceScores scores;
    std::string prune_error;
    const std::uint64_t prune_seed = derive_seed(seed, {kStreamPruneSeed, static_cast<std::uint64_t>(m)});
    if (dense_ok) {
      try {
        std::optional<NoisyBatch> calib;
        if (m == PruneMethod::taylor) {
          Rng cr = make_rng(seed, {kStreamCalib});
          calib = perturb(draw_noise_batch(train, c.calib_size, s.T, cr), s);
        }
        scores = importance_scores(m, dense, calib ? &*calib : nullptr, prune_seed);
      } catch (const Error& e) {
        prune_error = e.what();
      }
    }
    for (double ratio : c.prune_ratios) {
      const std::string gname = group_dir(m, ratio);
      const fs::path gdir = dir / gname;
      Json gt = Json::object();
      ScoreNetwork student;
      Json plan_json{{"method", to_string(m)}, {"target_ratio", ratio}, {"seed", prune_seed}};
      std::string group_error = dense_ok ? prune_error : "dense teacher " + dense_json["status"].get<std::string>();
      if (group_error.empty()) {
        try {
          PruningPlan plan;
          plan.method = m;
          plan.seed = prune_seed;
          const ScoreNetwork masked = prune_to_ratio(dense, scores, ratio, &plan);
          fs::create_directories(gdir);
          save_checkpoint((gdir / "pruned.ckpt").string(), {masked, c.schedule});
          plan_json["achieved_ratio"] = plan.achieved_ratio;
          plan_json["mac_ratio"] = plan.mac_ratio;
          plan_json["removed_units"] = plan.removed_units;
          plan_json["widths"] = detail::surviving_widths(masked);
          student = materialize_pruned(masked);
        } catch (const Error& e) {
          group_error = e.what();
        }
      }
      if (!group_error.empty()) plan_json["error"] = group_error;
      pruning.push_back(plan_json);

      for (const VariantConfig& v : c.variants) {
        Json row{{"seed", seed}, {"method", to_string(m)}, {"target_ratio", ratio}, {"variant", v.name}};
        row["weights"] = weights_json(v.weights);
        row["steps"] = c.steps_of(v);
        row["lr"] = c.lr_of(v);
        if (!group_error.empty()) {
          row["status"] = "skipped";
          row["error"] = group_error;
          results.push_back(row);
          continue;
        }
        detail::say(opt, "seed " + std::to_string(seed) + ": " + gname + " / " + v.name);
        Stopwatch vsw;
        try {
          TrainResult tr = run_finetune_variant(dense, student, v.weights,
                                                FinetuneSettings{c.steps_of(v), c.lr_of(v), c.finetune_batch}, s, train,
                                                seed);
          save_checkpoint((gdir / (v.name + ".ckpt")).string(), {tr.net, c.schedule});
          write_loss_csv((gdir / (v.name + "_loss.csv")).string(), tr.log);
          const double t_train = vsw.seconds();
          const EvalRecord ev = evaluate(tr.net, dense, ctx, &dense_eval);
          write_text(gdir / (v.name + "_ftle.json"), ftle_records_json(ev.ftle_points).dump(1) + "\n");
          if (c.write_samples) write_points_csv((gdir / (v.name + "_samples.csv")).string(), ev.samples);
          row["status"] = "ok";
          row["final_loss"] = loss_json(tr.log.empty() ? LossLogRow{0, kNaN, kNaN, kNaN, kNaN, kNaN, 0} : tr.log.back());
          row["param_ratio"] = param_ratio(dense, tr.net);
          row["mac_ratio"] = mac_ratio(dense, tr.net);
          row["metrics"] = metrics_json(ev);
          gt[v.name] = {{"finetune", t_train}, {"evaluate", vsw.seconds() - t_train}};
        } catch (const DivergenceError& e) {
          row["status"] = "diverged";
          row["error"] = e.what();
        } catch (const NonFiniteError& e) {
          row["status"] = "diverged";
          row["error"] = e.what();
        }
        results.push_back(row);
      }
      groups_t[gname] = gt;
    }
  }
  timings["groups"] = groups_t;
  seed_json["pruning"] = pruning;
  seed_json["results"] = results;
  return seed_json;
}

// ---------------------------------------------------------------------------
// Aggregation over seeds

inline constexpr const char* kMetricKeys[] = {"mmd", "sliced_wasserstein", "score_matching_error", "ftle",
                                              "ftle_gap", "kd_loss"};
inline constexpr const char* kLossKeys[] = {"total", "np", "kd", "jac", "first_jac"};

namespace detail {

inline double median_or_nan(std::vector<double> v) {
  std::erase_if(v, [](double x) { return !std::isfinite(x); });
  return v.empty() ? kNaN : median_of(std::move(v));
}

inline Json summarize(const std::vector<double>& vals) {
  std::vector<double> v;
  for (double x : vals)
    if (std::isfinite(x)) v.push_back(x);
  if (v.empty()) return {{"median", nullptr}, {"mean", nullptr}, {"std_error", nullptr}, {"n", 0}};
  const auto mw = mean_with_error(v);
  return {{"median", median_of(v)}, {"mean", mw.mean}, {"std_error", mw.std_error}, {"n", v.size()}};
}

}  // namespace detail

/// Per (method, ratio, variant): median, mean and standard error across seeds of every metric,
/// over rows with status ok. Also the dense teacher across seeds.
inline Json aggregate(const Json& seeds) {
  Json groups = Json::array();
  if (seeds.empty()) return groups;
  // group order follows the first seed's row order
  for (const Json& proto : seeds.front()["results"]) {
    Json g{{"method", proto["method"]}, {"target_ratio", proto["target_ratio"]}, {"variant", proto["variant"]}};
    std::size_t n_ok = 0;
    std::vector<std::vector<double>> metric_vals(std::size(kMetricKeys)), loss_vals(std::size(kLossKeys));
    for (const Json& sj : seeds) {
      for (const Json& row : sj["results"]) {
        if (row["method"] != proto["method"] || row["target_ratio"] != proto["target_ratio"] ||
            row["variant"] != proto["variant"] || row["status"] != "ok") {
          continue;
        }
        ++n_ok;
        for (std::size_t k = 0; k < std::size(kMetricKeys); ++k)
          metric_vals[k].push_back(number_or_nan(row["metrics"], kMetricKeys[k]));
        for (std::size_t k = 0; k < std::size(kLossKeys); ++k)
          loss_vals[k].push_back(number_or_nan(row["final_loss"], kLossKeys[k]));
      }
    }
    g["n_ok"] = n_ok;
    Json mj = Json::object(), lj = Json::object();
    for (std::size_t k = 0; k < std::size(kMetricKeys); ++k) mj[kMetricKeys[k]] = detail::summarize(metric_vals[k]);
    for (std::size_t k = 0; k < std::size(kLossKeys); ++k) lj[kLossKeys[k]] = detail::summarize(loss_vals[k]);
    g["metrics"] = mj;
    g["final_loss"] = lj;
    groups.push_back(g);
  }
  return groups;
}

inline Json aggregate_dense(const Json& seeds) {
  Json out = Json::object();
  for (const char* key : kMetricKeys) {
    std::vector<double> v;
    for (const Json& sj : seeds)
      if (sj["dense"]["status"] == "ok") v.push_back(number_or_nan(sj["dense"]["metrics"], key));
    out[key] = detail::summarize(v);
  }
  return out;
}

/// Aggregate entry for (method, ratio, variant), or null.
inline const Json* find_group(const Json& report, const std::string& method, double ratio, const std::string& variant) {
  for (const Json& g : report["aggregate"])
    if (g["method"] == method && g["target_ratio"].get<double>() == ratio && g["variant"] == variant) return &g;
  return nullptr;
}

// ---------------------------------------------------------------------------
// Tables

inline std::string csv_number(const Json& j) {
  if (j.is_null()) return "";
  if (j.is_number_integer() || j.is_number_unsigned()) return j.dump();
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", j.get<double>());
  return buf;
}

inline std::string csv_field(const Json& obj, const char* key) {
  if (!obj.is_object() || !obj.contains(key)) return "";
  const Json& v = obj.at(key);
  if (v.is_string()) return v.get<std::string>();
  return csv_number(v);
}

/// tables.csv: one row per seed x (method, ratio, variant). summary.csv: medians over seeds.
inline void write_tables(const Json& report, const std::filesystem::path& out) {
  std::ostringstream t;
  t << "seed,method,target_ratio,variant,status,params,macs,param_ratio,mac_ratio,loss_total,loss_np,loss_kd,"
       "loss_jac,loss_first_jac,mmd,sliced_wasserstein,score_matching_error,ftle,ftle_se,ftle_gap,kd_loss,"
       "ftle_nonconverged\n";
  for (const Json& sj : report["seeds"]) {
    for (const Json& row : sj["results"]) {
      const Json empty = Json::object();
      const Json& m = row.contains("metrics") ? row["metrics"] : empty;
      const Json& l = row.contains("final_loss") ? row["final_loss"] : empty;
      t << row["seed"].dump() << ',' << row["method"].get<std::string>() << ',' << csv_number(row["target_ratio"])
        << ',' << row["variant"].get<std::string>() << ',' << row["status"].get<std::string>() << ','
        << csv_field(m, "params") << ',' << csv_field(m, "macs") << ',' << csv_field(row, "param_ratio") << ','
        << csv_field(row, "mac_ratio") << ',' << csv_field(l, "total") << ',' << csv_field(l, "np") << ','
        << csv_field(l, "kd") << ',' << csv_field(l, "jac") << ',' << csv_field(l, "first_jac") << ','
        << csv_field(m, "mmd") << ',' << csv_field(m, "sliced_wasserstein") << ','
        << csv_field(m, "score_matching_error") << ',' << csv_field(m, "ftle") << ',' << csv_field(m, "ftle_se")
        << ',' << csv_field(m, "ftle_gap") << ',' << csv_field(m, "kd_loss") << ','
        << csv_field(m, "ftle_nonconverged") << '\n';
    }
  }
  write_text(out / "tables.csv", t.str());

  std::ostringstream s;
  s << "method,target_ratio,variant,n_ok";
  for (const char* k : kMetricKeys) s << ',' << k << "_median," << k << "_std_error";
  s << '\n';
  auto median_cols = [&](const Json& metrics) {
    for (const char* k : kMetricKeys) s << ',' << csv_field(metrics[k], "median") << ',' << csv_field(metrics[k], "std_error");
  };
  s << "dense,0,dense," << report["seeds"].size();
  median_cols(report["dense_aggregate"]);
  s << '\n';
  for (const Json& g : report["aggregate"]) {
    s << g["method"].get<std::string>() << ',' << csv_number(g["target_ratio"]) << ','
      << g["variant"].get<std::string>() << ',' << g["n_ok"].dump();
    median_cols(g["metrics"]);
    s << '\n';
  }
  write_text(out / "summary.csv", s.str());
}

inline Json config_json(const ExperimentConfig& c) {
  Json j = Json::object();
  for (const auto& [k, v] : config_entries(c)) j[k] = v;
  return j;
}

/// train_dense -> prune -> finetune variants -> evaluate for every seed, then report files.
inline Json run_pipeline(const ExperimentConfig& c, const RunOptions& opt = {}) {
  namespace fs = std::filesystem;
  c.validate();
  const fs::path out = c.out_dir;
  fs::create_directories(out);
  write_text(out / "config.conf", render_config(c));
  Json report;
  report["format"] = "jacmatch-report";
  report["version"] = 1;
  report["config"] = config_json(c);
  report["notes"] = Json::array({"taylor pruning stands in for Diff-Pruning",
                                 "pruning ratio counts parameters; mac_ratio is reported alongside",
                                 "FTLE is the mean over ftle_points seeded start points with horizon k/T"});
  Json seeds = Json::array();
  Json timings;
  timings["seeds"] = Json::object();
  Stopwatch total;
  for (std::uint64_t seed : c.seeds) {
    Json t;
    seeds.push_back(run_seed(c, seed, out, opt, t));
    timings["seeds"][std::to_string(seed)] = t;
  }
  report["seeds"] = seeds;
  report["dense_aggregate"] = aggregate_dense(seeds);
  report["aggregate"] = aggregate(seeds);
  write_text(out / "report.json", report.dump(1) + "\n");
  write_tables(report, out);
  timings["total"] = total.seconds();
  write_text(out / "timings.json", timings.dump(1) + "\n");
  return report;
}

inline Json load_report(const std::filesystem::path& p) { return Json::parse(read_text(p)); }

}  // namespace jacmatch
