#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "jacmatch/jacmatch.hpp"

namespace fs = std::filesystem;
using namespace jacmatch;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out;
  bool resume = false;
};

ExperimentConfig load(const Common& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (!o.out.empty()) c.out_dir = o.out;
  if (o.seed_given) c.seeds = {o.seed};
  c.validate();
  return c;
}

fs::path out_dir(const Common& o, const ExperimentConfig& c) {
  const fs::path p = o.out.empty() ? fs::path(c.out_dir) : fs::path(o.out);
  fs::create_directories(p);
  return p;
}

void add_common(CLI::App* app, Common& o) {
  app->add_option("--config", o.config, "config file (section.key = value)");
  app->add_option_function<std::uint64_t>(
      "--seed", [&o](std::uint64_t s) { o.seed = s, o.seed_given = true; }, "seed (default: first of run.seeds)");
  app->add_option("--out", o.out, "output directory (default: run.out_dir)");
  app->add_flag("--resume", o.resume, "reuse an existing dense checkpoint");
}

std::uint64_t seed_of(const ExperimentConfig& c) { return c.seeds.front(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Jacobian-matching distillation of pruned toy diffusion models"};
  app.require_subcommand(1);
  Common o;

  auto* gen = app.add_subcommand("gen-data", "write train.csv and holdout.csv");
  add_common(gen, o);

  auto* train = app.add_subcommand("train-dense", "train the dense teacher");
  add_common(train, o);

  std::string checkpoint, teacher, student, method = "magnitude", variant = "2ndm", sampler = "ddim";
  double ratio = 0.5;
  std::size_t n = 0;

  auto* prune = app.add_subcommand("prune", "prune a checkpoint to a parameter ratio");
  add_common(prune, o);
  prune->add_option("--checkpoint", checkpoint, "dense checkpoint")->required();
  prune->add_option("--method", method, "random | magnitude | lamp | taylor");
  prune->add_option("--ratio", ratio, "fraction of parameters to remove");

  auto* finetune = app.add_subcommand("finetune", "finetune a pruned student against a teacher");
  add_common(finetune, o);
  finetune->add_option("--teacher", teacher, "teacher checkpoint")->required();
  finetune->add_option("--student", student, "pruned student checkpoint")->required();
  finetune->add_option("--variant", variant, "variant name from the config");

  auto* sample = app.add_subcommand("sample", "draw samples with DDIM or DDPM");
  add_common(sample, o);
  sample->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  sample->add_option("-n,--n", n, "number of samples (default eval.samples)");
  sample->add_option("--sampler", sampler, "ddim | ddpm");

  auto* ftle_cmd = app.add_subcommand("ftle", "FTLE records of a model's flow map");
  add_common(ftle_cmd, o);
  ftle_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();

  auto* eval = app.add_subcommand("evaluate", "metrics of a model against a teacher");
  add_common(eval, o);
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  eval->add_option("--teacher", teacher, "teacher checkpoint")->required();

  auto* run = app.add_subcommand("run", "full pipeline for every seed");
  add_common(run, o);

  auto* report = app.add_subcommand("report", "re-render tables from report.json");
  add_common(report, o);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const auto c = load(o);
      const auto dir = out_dir(o, c);
      write_points_csv((dir / "train.csv").string(), train_set(c, seed_of(c)));
      write_points_csv((dir / "holdout.csv").string(), holdout_set(c, seed_of(c)));
    } else if (train->parsed()) {
      const auto c = load(o);
      const auto dir = out_dir(o, c);
      ScoreNetwork net;
      if (!(o.resume && detail::try_resume_dense(dir / "dense.ckpt", c, net))) {
        const TrainResult r = train_dense(c, train_set(c, seed_of(c)), seed_of(c));
        save_checkpoint((dir / "dense.ckpt").string(), {r.net, c.schedule});
        write_loss_csv((dir / "dense_loss.csv").string(), r.log);
        if (!r.log.empty()) std::cout << "final loss_np " << r.log.back().np << "\n";
      }
    } else if (prune->parsed()) {
      const auto c = load(o);
      const auto dir = out_dir(o, c);
      const Checkpoint ck = load_checkpoint(checkpoint);
      const PruneMethod m = parse_prune_method(method);
      const std::uint64_t seed = seed_of(c);
      std::optional<NoisyBatch> calib;
      if (m == PruneMethod::taylor) {
        const NoiseSchedule s = ck.schedule.make();
        Rng cr = make_rng(seed, {kStreamCalib});
        calib = perturb(draw_noise_batch(train_set(c, seed), c.calib_size, s.T, cr), s);
      }
      PruningPlan plan;
      plan.method = m;
      plan.seed = derive_seed(seed, {kStreamPruneSeed, static_cast<std::uint64_t>(m)});
      const auto scores = importance_scores(m, ck.net, calib ? &*calib : nullptr, plan.seed);
      const ScoreNetwork pruned = prune_to_ratio(ck.net, scores, ratio, &plan);
      save_checkpoint((dir / "pruned.ckpt").string(), {pruned, ck.schedule});
      const Json pj{{"method", method},
                    {"target_ratio", ratio},
                    {"seed", plan.seed},
                    {"achieved_ratio", plan.achieved_ratio},
                    {"mac_ratio", plan.mac_ratio},
                    {"removed_units", plan.removed_units},
                    {"widths", detail::surviving_widths(pruned)}};
      write_text(dir / "plan.json", pj.dump(1) + "\n");
      std::cout << pj.dump(1) << "\n";
    } else if (finetune->parsed()) {
      const auto c = load(o);
      const auto dir = out_dir(o, c);
      const Checkpoint t = load_checkpoint(teacher);
      const Checkpoint st = load_checkpoint(student);
      const VariantConfig* v = nullptr;
      for (const auto& vc : c.variants)
        if (vc.name == variant) v = &vc;
      if (!v) throw Error("variant '" + variant + "' is not in finetune.variants");
      const TrainResult r =
          run_finetune_variant(t.net, materialize_pruned(st.net), v->weights,
                               FinetuneSettings{c.steps_of(*v), c.lr_of(*v), c.finetune_batch}, t.schedule.make(),
                               train_set(c, seed_of(c)), seed_of(c));
      save_checkpoint((dir / (variant + ".ckpt")).string(), {r.net, t.schedule});
      write_loss_csv((dir / (variant + "_loss.csv")).string(), r.log);
    } else if (sample->parsed()) {
      const auto c = load(o);
      const auto dir = out_dir(o, c);
      const Checkpoint ck = load_checkpoint(checkpoint);
      const NoiseSchedule s = ck.schedule.make();
      Rng rng = make_rng(seed_of(c), {kStreamEvalNoise});
      const Tensor xT = randn(Shape{n ? n : c.eval_samples, ck.net.arch.input_dim}, rng);
      Tensor x;
      if (sampler == "ddim") x = sample_ddim(bind(ck.net), s, xT);
      else if (sampler == "ddpm") x = sample_ddpm(bind(ck.net), s, xT, rng);
      else throw Error("unknown sampler '" + sampler + "'");
      write_points_csv((dir / "samples.csv").string(), x);
    } else if (ftle_cmd->parsed()) {
      const auto c = load(o);
      const auto dir = out_dir(o, c);
      const Checkpoint ck = load_checkpoint(checkpoint);
      const EvalContext ctx = make_eval_context(c, seed_of(c), holdout_set(c, seed_of(c)));
      const auto est = model_ftle(ck.net, ctx);
      write_text(dir / "ftle.json", ftle_records_json(est).dump(1) + "\n");
      const FtleAverage a = average_ftle(est);
      std::cout << "ftle " << a.mean << " +- " << a.std_error << " (" << a.n_nonconverged << " not converged)\n";
    } else if (eval->parsed()) {
      const auto c = load(o);
      const auto dir = out_dir(o, c);
      const Checkpoint m = load_checkpoint(checkpoint);
      const Checkpoint t = load_checkpoint(teacher);
      const EvalContext ctx = make_eval_context(c, seed_of(c), holdout_set(c, seed_of(c)));
      const EvalRecord r = evaluate(m.net, t.net, ctx);
      const Json j = metrics_json(r);
      write_text(dir / "metrics.json", j.dump(1) + "\n");
      std::cout << j.dump(1) << "\n";
    } else if (run->parsed()) {
      const auto c = load(o);
      run_pipeline(c, RunOptions{o.resume, &std::cerr});
      std::cout << "wrote " << (fs::path(c.out_dir) / "report.json").string() << "\n";
    } else if (report->parsed()) {
      const fs::path dir = !o.out.empty() ? fs::path(o.out) : fs::path(load(o).out_dir);
      const Json r = load_report(dir / "report.json");
      write_tables(r, dir);
      std::cout << read_text(dir / "summary.csv");
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
