#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "jacmatch/config.hpp"
#include "jacmatch/losses.hpp"
#include "jacmatch/optim.hpp"

namespace jacmatch {

/// Non-finite loss or gradient during training.
class DivergenceError : public NonFiniteError {
 public:
  DivergenceError(long step, const std::string& what)
      : NonFiniteError("diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

// stream labels
inline constexpr std::uint64_t kStreamInit = 0x696e6974ULL;
inline constexpr std::uint64_t kStreamDense = 0x64656e7365ULL;
inline constexpr std::uint64_t kStreamFinetune = 0x66696e65ULL;
inline constexpr std::uint64_t kStreamProbe = 0x70736565ULL;
inline constexpr std::uint64_t kStreamHoldout = 0x686f6c64ULL;

/// A 64-bit seed derived from (seed, labels); independent of every other stream.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> labels) {
  Rng rng = make_rng(seed, labels);
  return rng();
}

struct LossLogRow {
  long step = 0;
  double total = 0.0;
  double np = 0.0;
  double kd = 0.0;
  double jac = 0.0;
  double first_jac = 0.0;
  std::uint64_t probe_seed = 0;
};

struct TrainResult {
  ScoreNetwork net;
  std::vector<LossLogRow> log;
};

inline void write_loss_csv(const std::string& path, const std::vector<LossLogRow>& log) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path);
  f << "step,loss_total,loss_np,loss_kd,loss_jac,probe_seed,loss_first_jac\n";
  char buf[256];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%ld,%.17g,%.17g,%.17g,%.17g,%llu,%.17g\n", r.step, r.total, r.np, r.kd, r.jac,
                  static_cast<unsigned long long>(r.probe_seed), r.first_jac);
    f << buf;
  }
}

namespace detail {

inline void check_gradient(const Tensor& g, long step) {
  for (double v : g.values())
    if (!std::isfinite(v)) throw DivergenceError(step, "non-finite gradient");
}

}  // namespace detail

struct DenseSettings {
  Architecture arch;
  long steps = 5000;
  double lr = 1e-3;
  std::size_t batch = 256;
  double ema = 0.0;
};

/// Fresh network trained with the noise-prediction loss. With ema > 0 the returned weights are an
/// exponential moving average of the iterates (decay ramped up as (1 + step) / (10 + step)).
inline TrainResult train_dense(const DenseSettings& d, const NoiseSchedule& s, const Tensor& train, std::uint64_t seed) {
  if (train.rank() != 2 || train.rows() == 0) throw Error("train_dense needs training points");
  if (d.steps < 0 || d.batch < 1) throw Error("invalid dense settings");
  Rng init = make_rng(seed, {kStreamInit});
  TrainResult r{init_network(d.arch, init), {}};
  Rng batches = make_rng(seed, {kStreamDense});
  Adam adam(r.net.params.size(), AdamOptions{d.lr});
  if (!(d.ema >= 0.0 && d.ema < 1.0)) throw Error("ema decay must be in [0, 1)");
  Tensor avg = r.net.params;
  for (long step = 0; step < d.steps; ++step) {
    const NoisyBatch b = perturb(draw_noise_batch(train, d.batch, s.T, batches), s);
    Tape tape;
    const Var p = tape.leaf(r.net.params);
    const Var loss = loss_np(bind(r.net, p), b);
    const double lv = loss.value().item();
    if (!std::isfinite(lv)) throw DivergenceError(step, "non-finite loss_np");
    tape.backward(loss);
    const Tensor g = tape.grad(p);
    detail::check_gradient(g, step);
    adam.step(r.net.params, g);
    if (d.ema > 0.0) {
      const double k = std::min(d.ema, (1.0 + static_cast<double>(step)) / (10.0 + static_cast<double>(step)));
      for (std::size_t i = 0; i < avg.size(); ++i) avg[i] = k * avg[i] + (1.0 - k) * r.net.params[i];
    }
    r.log.push_back({step, lv, lv, 0.0, 0.0, 0.0, 0});
  }
  if (d.ema > 0.0 && d.steps > 0) r.net.params = std::move(avg);
  return r;
}

inline TrainResult train_dense(const ExperimentConfig& c, const Tensor& train, std::uint64_t seed) {
  const DenseSettings d{c.arch, c.dense_steps, c.dense_lr, c.dense_batch, c.dense_ema};
  return train_dense(d, c.schedule.make(), train, seed);
}

struct FinetuneSettings {
  long steps = 2000;
  double lr = 3e-4;
  std::size_t batch = 256;
};

/// Finetunes `student` against `teacher` with total_loss. Every variant with the same seed sees
/// the same minibatches and probe seeds.
inline TrainResult run_finetune_variant(const ScoreNetwork& teacher, const ScoreNetwork& student, const LossWeights& w,
                                        const FinetuneSettings& f, const NoiseSchedule& s, const Tensor& train,
                                        std::uint64_t seed) {
  w.validate();
  if (param_count(student) >= param_count(teacher)) throw Error("student must be smaller than the teacher");
  if (f.steps < 0 || f.batch < 1) throw Error("invalid finetune settings");
  TrainResult r{student, {}};
  const auto bt = bind(teacher);
  Rng batches = make_rng(seed, {kStreamFinetune});
  Adam adam(r.net.params.size(), AdamOptions{f.lr});
  for (long step = 0; step < f.steps; ++step) {
    const NoisyBatch b = perturb(draw_noise_batch(train, f.batch, s.T, batches), s);
    const std::uint64_t probe_seed = derive_seed(seed, {kStreamProbe, static_cast<std::uint64_t>(step)});
    Tape tape;
    const Var p = tape.leaf(r.net.params);
    LossLogRow row;
    try {
      const auto br = total_loss(w, bind(r.net, p), bt, b, probe_seed);
      row = {step, br.total.value().item(), br.np, br.kd, br.jac, br.first_jac, probe_seed};
      tape.backward(br.total);
    } catch (const NonFiniteError& e) {
      throw DivergenceError(step, e.what());
    }
    const Tensor g = tape.grad(p);
    detail::check_gradient(g, step);
    adam.step(r.net.params, g);
    r.log.push_back(row);
  }
  return r;
}

}  // namespace jacmatch
