#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "jacmatch/diffusion.hpp"
#include "jacmatch/scorenet.hpp"

namespace jacmatch {

/// Clean points, per-row timesteps and the noise used to corrupt them.
struct NoiseBatch {
  Tensor x0;
  std::vector<int> t;
  Tensor eps;
};

/// A NoiseBatch after forward_perturb.
struct NoisyBatch {
  Tensor xt;
  std::vector<int> t;
  Tensor eps;
};

inline NoisyBatch perturb(const NoiseBatch& b, const NoiseSchedule& s) {
  if (b.t.empty()) throw Error("empty batch");
  return {forward_perturb(b.x0, b.t, b.eps, s), b.t, b.eps};
}

inline NoiseBatch draw_noise_batch(const Tensor& data, std::size_t batch, int T, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, data.rows() - 1);
  Tensor x0(Shape{batch, data.cols()});
  for (std::size_t i = 0; i < batch; ++i) {
    auto src = data.row(pick(rng));
    std::copy(src.begin(), src.end(), x0.row(i).begin());
  }
  auto t = rand_timesteps(batch, T, rng);
  Tensor eps = randn(x0.shape(), rng);
  return {std::move(x0), std::move(t), std::move(eps)};
}

/// Mean over rows of the squared Euclidean norm of each row.
template <class X>
X mean_sq_row_norm(const X& d) {
  return mean(row_sum(square(d)));
}

template <class Student>
auto loss_np(const Student& student, const NoisyBatch& b) {
  return mean_sq_row_norm(student(b.xt, b.t) - b.eps);
}

template <class Student>
auto loss_np(const Student& student, const NoiseBatch& b, const NoiseSchedule& s) {
  return loss_np(student, perturb(b, s));
}

template <class Student, class Teacher>
auto loss_kd(const Student& student, const Teacher& teacher, const Tensor& xt, const std::vector<int>& t) {
  return mean_sq_row_norm(student(xt, t) - value_of(teacher(xt, t)));
}

/// 1/2 E || s(x + sigma z) + z / sigma ||^2 with x~ - x = sigma z. `model(x~, sigma)` returns a score.
template <class Model>
auto dsm_loss(const Model& model, const Tensor& x, const Tensor& z, double sigma) {
  if (!(sigma > 0.0)) throw Error("dsm_loss: sigma must be positive");
  require_same_shape(x, z, "dsm_loss");
  const Tensor xt = x + sigma * z;
  return 0.5 * mean_sq_row_norm(model(xt, sigma) + (1.0 / sigma) * z);
}

/// (1/L) sum_i lambda_i dsm(sigma_i); lambda defaults to sigma^2. One noise draw per scale.
template <class Model>
auto multiscale_dsm(const Model& model, const Tensor& x, const std::vector<Tensor>& z, const std::vector<double>& sigmas,
                    std::vector<double> weights = {}) {
  if (sigmas.empty() || z.size() != sigmas.size()) throw Error("multiscale_dsm: one noise draw per sigma required");
  if (weights.empty()) {
    for (double s : sigmas) weights.push_back(s * s);
  }
  if (weights.size() != sigmas.size()) throw Error("multiscale_dsm: weight count mismatch");
  for (double w : weights)
    if (!(w >= 0.0)) throw Error("multiscale_dsm: weights must be non-negative");
  const double L = static_cast<double>(sigmas.size());
  auto acc = (weights[0] / L) * dsm_loss(model, x, z[0], sigmas[0]);
  for (std::size_t i = 1; i < sigmas.size(); ++i) acc = acc + (weights[i] / L) * dsm_loss(model, x, z[i], sigmas[i]);
  return acc;
}

/// Probe directions, one vector of length `dim` each.
struct ProbeSet {
  std::vector<Tensor> directions;
  std::uint64_t seed = 0;
};

inline ProbeSet make_probes(std::size_t n, std::size_t dim, std::uint64_t seed, bool normalized) {
  Rng rng = make_rng(seed, {0x70726f6265ULL, normalized ? 1ULL : 0ULL});
  ProbeSet p{{}, seed};
  for (std::size_t i = 0; i < n; ++i) {
    Tensor v = randn(Shape{dim}, rng);
    if (normalized) {
      const double nrm = std::sqrt(squared_norm(v.values()));
      v = (1.0 / nrm) * v;
    }
    p.directions.push_back(std::move(v));
  }
  return p;
}

/// The same direction repeated on every row.
inline Tensor broadcast_rows(const Tensor& v, std::size_t rows) {
  Tensor out(Shape{rows, v.size()});
  for (std::size_t r = 0; r < rows; ++r) std::copy(v.values().begin(), v.values().end(), out.row(r).begin());
  return out;
}

namespace detail {

template <class A>
void add_to(std::optional<A>& acc, A term) {
  acc = acc ? *acc + term : std::move(term);
}

inline void check_probe_dims(const ProbeSet& probes, const Tensor& xt) {
  if (probes.directions.empty()) throw Error("at least one probe required");
  for (const Tensor& v : probes.directions) {
    if (v.size() != xt.cols()) throw ShapeError("probe dimension does not match the input");
  }
}

}  // namespace detail

/// Monte-Carlo estimate of ||J - J_D||_F^2 via E_v ||(J - J_D) v||^2, v ~ N(0, I) unnormalized.
template <class Student, class Teacher>
auto loss_first_jac(const Student& student, const Teacher& teacher, const Tensor& xt, const std::vector<int>& t,
                    const ProbeSet& probes) {
  detail::check_probe_dims(probes, xt);
  using Out = decltype(mean_sq_row_norm(student(DualBatch{xt, xt}, t).tangent - Tensor()));
  std::optional<Out> acc;
  for (const Tensor& v : probes.directions) {
    const DualBatch in{xt, broadcast_rows(v, xt.rows())};
    const auto ds = student(in, t);
    const auto dt = teacher(in, t);
    detail::add_to(acc, mean_sq_row_norm(ds.tangent - value_of(dt.tangent)));
  }
  return (1.0 / static_cast<double>(probes.directions.size())) * *acc;
}

/// E[(||J v||^2 - ||J_D v||^2)^2] over rows and probes, two JVPs per probe.
template <class Student, class Teacher>
auto loss_2nd_jac(const Student& student, const Teacher& teacher, const Tensor& xt, const std::vector<int>& t,
                  const ProbeSet& probes) {
  detail::check_probe_dims(probes, xt);
  using Out = decltype(mean(square(row_sum(square(student(DualBatch{xt, xt}, t).tangent)) - Tensor())));
  std::optional<Out> acc;
  for (const Tensor& v : probes.directions) {
    const DualBatch in{xt, broadcast_rows(v, xt.rows())};
    const auto ds = student(in, t);
    const Tensor qt = row_sum(square(value_of(teacher(in, t).tangent)));
    detail::add_to(acc, mean(square(row_sum(square(ds.tangent)) - qt)));
  }
  return (1.0 / static_cast<double>(probes.directions.size())) * *acc;
}

struct LossWeights {
  double lambda_np = 1.0;
  double lambda_kd = 1.0;
  double lambda_jac = 0.1;
  std::size_t n_probes = 1;
  bool enable_first_jac = false;
  double lambda_first_jac = 0.0;

  void validate() const {
    for (double l : {lambda_np, lambda_kd, lambda_jac, lambda_first_jac}) {
      if (!(l >= 0.0) || !std::isfinite(l)) throw Error("loss weights must be finite and non-negative");
    }
    if (n_probes < 1) throw Error("n_probes must be at least 1");
    const bool any = lambda_np > 0 || lambda_kd > 0 || lambda_jac > 0 || (enable_first_jac && lambda_first_jac > 0);
    if (!any) throw Error("at least one loss weight must be positive");
  }

  bool uses_teacher() const { return lambda_kd > 0 || lambda_jac > 0 || (enable_first_jac && lambda_first_jac > 0); }
  bool uses_jvp() const { return lambda_jac > 0 || (enable_first_jac && lambda_first_jac > 0); }
  bool operator==(const LossWeights&) const = default;
};

template <class S>
struct LossBreakdown {
  S total;
  double np = 0.0;
  double kd = 0.0;
  double jac = 0.0;
  double first_jac = 0.0;
};

/// Weighted sum lambda_np L_np + lambda_kd L_kd + lambda_jac L_2nd-jac (+ optional first-order term).
/// When the JVP pass runs, its primal supplies the NP and KD outputs. Zero-weight terms are
/// still reported when they come for free.
template <class Student, class Teacher>
auto total_loss(const LossWeights& w, const Student& student, const Teacher& teacher, const NoisyBatch& b,
                std::uint64_t probe_seed) {
  w.validate();
  const Tensor& xt = b.xt;
  using S = typename Student::template output_t<Tensor>;
  std::optional<S> acc;
  LossBreakdown<S> out{};

  auto add = [&](double lambda, const S& term, double& slot) {
    slot = value_of(term).item();
    if (lambda > 0.0) detail::add_to(acc, lambda * term);
  };

  if (w.lambda_jac == 0.0) {
    const S y = student(xt, b.t);
    add(w.lambda_np, mean_sq_row_norm(y - b.eps), out.np);
    if (w.uses_teacher()) add(w.lambda_kd, mean_sq_row_norm(y - value_of(teacher(xt, b.t))), out.kd);
  } else {
    const ProbeSet probes = make_probes(w.n_probes, xt.cols(), probe_seed, true);
    std::optional<S> jac;
    for (std::size_t p = 0; p < probes.directions.size(); ++p) {
      const DualBatch in{xt, broadcast_rows(probes.directions[p], xt.rows())};
      const auto ds = student(in, b.t);
      const auto dt = teacher(in, b.t);
      if (p == 0) {
        add(w.lambda_np, mean_sq_row_norm(ds.primal - b.eps), out.np);
        add(w.lambda_kd, mean_sq_row_norm(ds.primal - value_of(dt.primal)), out.kd);
      }
      const Tensor qt = row_sum(square(value_of(dt.tangent)));
      detail::add_to(jac, mean(square(row_sum(square(ds.tangent)) - qt)));
    }
    add(w.lambda_jac, (1.0 / static_cast<double>(w.n_probes)) * *jac, out.jac);
  }
  if (w.enable_first_jac && w.lambda_first_jac > 0) {
    const ProbeSet raw = make_probes(w.n_probes, xt.cols(), probe_seed, false);
    add(w.lambda_first_jac, loss_first_jac(student, teacher, xt, b.t, raw), out.first_jac);
  }
  out.total = *acc;
  require_finite(value_of(out.total), "total loss");
  return out;
}

// ---------------------------------------------------------------------------
// Second-order behaviour of the output gap under input noise.

struct TaylorRow {
  double sigma = 0.0;
  double gap = 0.0;             // E ||d(x + zeta)||^2 - ||d(x)||^2, zeta ~ N(0, sigma^2 I)
  double frob_estimate = 0.0;   // sigma^2 ||(J - J_D) z||^2 averaged over the same draws
  double residual = 0.0;        // gap - frob_estimate
  double frob_exact = 0.0;      // sigma^2 ||J - J_D||_F^2 from basis JVPs
};

/// Uses antithetic pairs (z, -z) and the same draws for every sigma, so odd-order terms cancel
/// exactly and the residual isolates the even higher-order remainder.
template <class Student, class Teacher>
std::vector<TaylorRow> taylor_redundancy_check(const Student& student, const Teacher& teacher, const Tensor& x, int t,
                                               const std::vector<double>& sigmas, std::size_t n_draws,
                                               std::uint64_t seed) {
  const Tensor x1 = as_batch(x);
  if (x1.rows() != 1) throw ShapeError("taylor_redundancy_check takes a single point");
  if (n_draws == 0) throw Error("need at least one draw");
  const std::size_t d = x1.cols();
  Rng rng = make_rng(seed, {0x7461796cULL});
  const Tensor z = randn(Shape{n_draws, d}, rng);
  const Tensor xs = broadcast_rows(x1.reshaped({d}), n_draws);
  const std::vector<int> ts(n_draws, t);

  auto diff = [&](const Tensor& pts) {
    const std::vector<int> tt(pts.rows(), t);
    return value_of(student(pts, tt)) - value_of(teacher(pts, tt));
  };
  const double d0 = squared_norm(diff(x1).values());

  // (J - J_D) z for every draw, by forward mode
  const Tensor jz = value_of(student(DualBatch{xs, z}, ts).tangent) - value_of(teacher(DualBatch{xs, z}, ts).tangent);
  const double jz_sq = kernels::sum(row_sum(square(jz))) / static_cast<double>(n_draws);

  double frob = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    Tensor e(Shape{1, d});
    e[i] = 1.0;
    const Tensor col =
        value_of(student(DualBatch{x1, e}, {t}).tangent) - value_of(teacher(DualBatch{x1, e}, {t}).tangent);
    frob += squared_norm(col.values());
  }

  std::vector<TaylorRow> rows;
  for (double s : sigmas) {
    if (!(s > 0.0)) throw Error("sigma must be positive");
    const Tensor plus = diff(xs + s * z);
    const Tensor minus = diff(xs - s * z);
    double acc = 0.0;
    for (std::size_t i = 0; i < n_draws; ++i) {
      acc += 0.5 * (squared_norm(plus.row(i)) + squared_norm(minus.row(i)));
    }
    TaylorRow r;
    r.sigma = s;
    r.gap = acc / static_cast<double>(n_draws) - d0;
    r.frob_estimate = s * s * jz_sq;
    r.residual = r.gap - r.frob_estimate;
    r.frob_exact = s * s * frob;
    rows.push_back(r);
  }
  return rows;
}

/// Least-squares slope of log|residual| against log sigma.
inline double residual_loglog_slope(const std::vector<TaylorRow>& rows) {
  if (rows.size() < 2) throw Error("slope needs at least two rows");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(rows.size());
  for (const auto& r : rows) {
    const double lx = std::log(r.sigma), ly = std::log(std::abs(r.residual));
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

/// Copy of `student` whose output bias is shifted so that student and teacher agree at (x, t).
/// Without this the gap picks up a sigma^2 term d(x)^T tr(H) that the Frobenius form omits.
inline ScoreNetwork align_output_bias(ScoreNetwork student, const ScoreNetwork& teacher, const Tensor& x, int t) {
  const Tensor d = forward(student, x, t) - forward(teacher, x, t);
  const LayerShape out = layer_shapes(student.arch).back();
  for (std::size_t j = 0; j < out.out; ++j) student.params[out.bias_offset + j] -= d[j];
  return student;
}

}  // namespace jacmatch
