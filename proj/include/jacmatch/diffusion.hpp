#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "jacmatch/autodiff.hpp"
#include "jacmatch/rng.hpp"

namespace jacmatch {

enum class ScheduleKind { linear, cosine };

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "cosine"; }

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw Error("unknown schedule kind '" + s + "'");
}

/// Discrete diffusion schedule over timesteps 0..T-1.
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::linear;
  int T = 0;
  double beta_min = 0.0;
  double beta_max = 0.0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;  // sqrt(1 - alpha_bar) / sqrt(alpha_bar)

  /// alpha_bar with the convention alpha_bar(-1) = 1 (clean data).
  double alpha_bar_at(int t) const {
    if (t == -1) return 1.0;
    check_t(t);
    return alpha_bar[static_cast<std::size_t>(t)];
  }

  void check_t(int t) const {
    if (t < 0 || t >= T) throw Error("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + ")");
  }
};

inline NoiseSchedule make_schedule(ScheduleKind kind, int T, double beta_min, double beta_max) {
  if (T < 2) throw Error("schedule needs T >= 2");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
    throw Error("schedule needs 0 < beta_min <= beta_max < 1");
  }
  NoiseSchedule s;
  s.kind = kind;
  s.T = T;
  s.beta_min = beta_min;
  s.beta_max = beta_max;
  s.beta.resize(T);
  if (kind == ScheduleKind::linear) {
    for (int i = 0; i < T; ++i) s.beta[i] = beta_min + (beta_max - beta_min) * i / (T - 1);
  } else {
    constexpr double offset = 0.008;
    auto f = [&](double tau) {
      const double c = std::cos((tau / T + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int i = 0; i < T; ++i) s.beta[i] = std::clamp(1.0 - f(i + 1.0) / f(i), beta_min, beta_max);
  }
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  s.sigma.resize(T);
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    s.alpha[i] = 1.0 - s.beta[i];
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
    s.sigma[i] = std::sqrt(1.0 - prod) / std::sqrt(prod);
  }
  return s;
}

/// x~ = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, one timestep per row.
inline Tensor forward_perturb(const Tensor& x0, const std::vector<int>& t, const Tensor& eps, const NoiseSchedule& s) {
  require_same_shape(x0, eps, "forward_perturb");
  const Tensor xb = as_batch(x0);
  if (t.size() != xb.rows()) throw ShapeError("forward_perturb: one timestep per row required");
  Tensor out = as_batch(eps);
  for (std::size_t i = 0; i < xb.rows(); ++i) {
    s.check_t(t[i]);
    const double ab = s.alpha_bar[static_cast<std::size_t>(t[i])];
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    auto src = xb.row(i);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = a * src[j] + b * dst[j];
  }
  return out.reshaped(x0.shape());
}

inline Tensor forward_perturb(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  return forward_perturb(x0, std::vector<int>(as_batch(x0).rows(), t), eps, s);
}

template <class X>
std::size_t batch_rows(const X& x) {
  return value_of(x).rows();
}

/// Deterministic update x_t -> x_{t_prev}. t_prev = -1 denotes the final step to data.
template <class Model, class X>
X ddim_step(const Model& model, const X& x_t, int t, int t_prev, const NoiseSchedule& s) {
  if (t_prev == t) return x_t;
  s.check_t(t);
  if (t_prev > t || t_prev < -1) throw Error("ddim_step: need -1 <= t_prev < t");
  X eps = model(x_t, std::vector<int>(batch_rows(x_t), t));
  require_finite(value_of(eps), "ddim_step model output");
  const double ab = s.alpha_bar_at(t);
  const double ab_prev = s.alpha_bar_at(t_prev);
  X x0_hat = (1.0 / std::sqrt(ab)) * (x_t - std::sqrt(1.0 - ab) * eps);
  return std::sqrt(ab_prev) * x0_hat + std::sqrt(1.0 - ab_prev) * eps;
}

/// Ancestral step x_t -> x_{t-1} with explicit noise; no noise is added at t = 0.
template <class Model>
Tensor ddpm_step(const Model& model, const Tensor& x_t, int t, const NoiseSchedule& s, const Tensor& noise) {
  s.check_t(t);
  require_same_shape(x_t, noise, "ddpm_step");
  Tensor eps = model(x_t, std::vector<int>(x_t.rows(), t));
  require_finite(eps, "ddpm_step model output");
  const double beta = s.beta[t];
  const double ab = s.alpha_bar[t];
  Tensor mean = (1.0 / std::sqrt(s.alpha[t])) * (x_t - (beta / std::sqrt(1.0 - ab)) * eps);
  if (t == 0) return mean;
  const double posterior_var = beta * (1.0 - s.alpha_bar_at(t - 1)) / (1.0 - ab);
  return mean + std::sqrt(posterior_var) * noise;
}

struct FlowMapSpec {
  int t_start = 0;
  int k = 1;

  void validate(const NoiseSchedule& s) const {
    s.check_t(t_start);
    if (k < 1 || t_start - k < 0) throw Error("flow map needs k >= 1 and t_start - k >= 0");
  }
};

/// k composed DDIM steps t_start -> t_start - k, usable as a generic map.
template <class Model>
class FlowMap {
 public:
  FlowMap(const Model& model, const NoiseSchedule& schedule, FlowMapSpec spec)
      : model_(&model), schedule_(&schedule), spec_(spec) {
    spec_.validate(schedule);
  }

  template <class X>
  X operator()(const X& x) const {
    X cur = x;
    for (int i = 0; i < spec_.k; ++i) {
      const int t = spec_.t_start - i;
      cur = ddim_step(*model_, cur, t, t - 1, *schedule_);
    }
    return cur;
  }

  /// Horizon in normalized schedule time, k / T.
  double horizon_time() const { return static_cast<double>(spec_.k) / schedule_->T; }
  const FlowMapSpec& spec() const { return spec_; }

 private:
  const Model* model_;
  const NoiseSchedule* schedule_;
  FlowMapSpec spec_;
};

template <class Model, class X>
X flow_map(const FlowMapSpec& spec, const Model& model, const NoiseSchedule& s, const X& x) {
  return FlowMap<Model>(model, s, spec)(x);
}

/// Full deterministic sampling chain from x_T (rows) at t = T-1 down to data.
template <class Model>
Tensor sample_ddim(const Model& model, const NoiseSchedule& s, const Tensor& x_T) {
  Tensor x = x_T;
  for (int t = s.T - 1; t >= 0; --t) x = ddim_step(model, x, t, t - 1, s);
  return x;
}

template <class Model>
Tensor sample_ddpm(const Model& model, const NoiseSchedule& s, const Tensor& x_T, Rng& rng) {
  Tensor x = x_T;
  for (int t = s.T - 1; t >= 0; --t) x = ddpm_step(model, x, t, s, randn(x.shape(), rng));
  return x;
}

// ---------------------------------------------------------------------------
// Closed-form models used as oracles.

/// eps-hat = 0.
struct ZeroModel {
  template <class X>
  X operator()(const X& x, const std::vector<int>&) const {
    return 0.0 * x;
  }
};

/// eps-hat = A x + c, independent of t.
struct LinearModel {
  Tensor weight;  // A^T, (in x out)
  Tensor bias;

  explicit LinearModel(const Tensor& A) : weight(kernels::transpose(A)), bias(Shape{A.rows()}) {}
  LinearModel(const Tensor& A, Tensor c) : weight(kernels::transpose(A)), bias(std::move(c)) {}

  template <class X>
  X operator()(const X& x, const std::vector<int>&) const {
    return add_row(matmul(x, weight), bias);
  }
};

}  // namespace jacmatch
