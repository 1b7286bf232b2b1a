#pragma once

// Stretching statistics of a map x -> Phi(x) applied row-wise to a batch.
// Maps are generic callables usable with Tensor, DualBatch and Var inputs (a
// FlowMap, a LinearModel wrapper, a lambda taking `const auto&`). Rows never
// interact, so a batch of points is processed as independent problems.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "jacmatch/diffusion.hpp"
#include "jacmatch/scorenet.hpp"

namespace jacmatch {

/// J v for each row of x with the matching row of v.
template <class Map>
Tensor jvp_rows(const Map& map, const Tensor& x, const Tensor& v) {
  return jvp([&](const auto& z) { return map(z); }, x, v).second;
}

/// J^T u for each row.
template <class Map>
Tensor vjp_rows(const Map& map, const Tensor& x, const Tensor& u) {
  return vjp([&](const auto& z) { return map(z); }, x, u);
}

/// ||J v||^2 per row, v given per row (or one vector for all rows).
template <class Map>
Tensor directional_sensitivity(const Map& map, const Tensor& x, const Tensor& v) {
  const Tensor xb = as_batch(x);
  const Tensor vb = v.rank() == 1 ? [&] {
    Tensor out(xb.shape());
    for (std::size_t r = 0; r < xb.rows(); ++r) std::copy(v.values().begin(), v.values().end(), out.row(r).begin());
    return out;
  }()
                                   : v;
  return row_sum(square(jvp_rows(map, xb, vb)));
}

struct PowerIterationOptions {
  int max_iters = 50;
  double tol = 1e-6;
  std::uint64_t seed = 0;

  void validate() const {
    if (max_iters < 1) throw Error("max_iters must be at least 1");
    if (!(tol > 0.0)) throw Error("tol must be positive");
  }
};

struct SingularValueSq {
  double lambda_max = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Deterministic unit start vector shared by all points.
inline Tensor power_start(std::size_t dim, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x706f776572ULL});
  Tensor v = randn(Shape{dim}, rng);
  return (1.0 / std::sqrt(squared_norm(v.values()))) * v;
}

/// Largest eigenvalue of J^T J per row by power iteration u <- J^T J u / ||J^T J u||.
/// The estimate is the Rayleigh quotient ||J u||^2 at the current unit iterate; a row stops
/// once successive estimates differ by less than tol relatively, and is frozen from then on.
template <class Map>
std::vector<SingularValueSq> max_singular_value_sq(const Map& map, const Tensor& x, const PowerIterationOptions& opt) {
  opt.validate();
  const Tensor xb = as_batch(x);
  const std::size_t n = xb.rows(), d = xb.cols();
  std::vector<SingularValueSq> out(n);
  std::vector<double> prev(n, 0.0);
  const Tensor start = power_start(d, opt.seed);
  Tensor u(Shape{n, d});
  for (std::size_t r = 0; r < n; ++r) std::copy(start.values().begin(), start.values().end(), u.row(r).begin());

  // rows still iterating; finished rows drop out of the batch
  std::vector<std::size_t> active(n);
  for (std::size_t r = 0; r < n; ++r) active[r] = r;

  auto gather = [&](const Tensor& src) {
    Tensor g(Shape{active.size(), d});
    for (std::size_t i = 0; i < active.size(); ++i)
      std::copy(src.row(active[i]).begin(), src.row(active[i]).end(), g.row(i).begin());
    return g;
  };

  for (int it = 1; it <= opt.max_iters && !active.empty(); ++it) {
    const Tensor xa = gather(xb);
    const Tensor ju = jvp_rows(map, xa, gather(u));
    const Tensor w = vjp_rows(map, xa, ju);
    std::vector<std::size_t> still;
    for (std::size_t i = 0; i < active.size(); ++i) {
      const std::size_t r = active[i];
      const double lam = squared_norm(ju.row(i));
      out[r].lambda_max = lam;
      out[r].iterations = it;
      if (it > 1 && std::abs(lam - prev[r]) <= opt.tol * std::abs(lam)) {
        out[r].converged = true;
        continue;
      }
      prev[r] = lam;
      const double nrm = std::sqrt(squared_norm(w.row(i)));
      if (nrm == 0.0) {
        // J^T J u = 0: the estimate is exactly zero and cannot improve
        out[r].converged = lam == 0.0;
        continue;
      }
      auto dst = u.row(r);
      auto src = w.row(i);
      for (std::size_t j = 0; j < d; ++j) dst[j] = src[j] / nrm;
      still.push_back(r);
    }
    active = std::move(still);
  }
  return out;
}

struct FtleEstimate {
  Tensor x0;
  int t_start = 0;
  int k = 0;
  double lambda_max = 0.0;
  double ftle = 0.0;
  int iterations = 0;
  bool converged = false;
  double horizon_time = 0.0;
};

/// Lambda = ln(sqrt(lambda_max)) / horizon for every row of x.
template <class Map>
std::vector<FtleEstimate> ftle(const Map& map, double horizon_time, const Tensor& x, const PowerIterationOptions& opt,
                               int t_start = 0, int k = 0) {
  if (!(horizon_time > 0.0)) throw Error("ftle needs a positive horizon");
  const Tensor xb = as_batch(x);
  const auto sv = max_singular_value_sq(map, xb, opt);
  std::vector<FtleEstimate> out;
  for (std::size_t r = 0; r < xb.rows(); ++r) {
    FtleEstimate e;
    e.x0 = Tensor(Shape{xb.cols()}, std::vector<double>(xb.row(r).begin(), xb.row(r).end()));
    e.t_start = t_start;
    e.k = k;
    e.lambda_max = sv[r].lambda_max;
    e.ftle = 0.5 * std::log(sv[r].lambda_max) / horizon_time;
    e.iterations = sv[r].iterations;
    e.converged = sv[r].converged;
    e.horizon_time = horizon_time;
    out.push_back(std::move(e));
  }
  return out;
}

/// FTLE of the k-step DDIM flow map of `model` started at t_start.
template <class Model>
std::vector<FtleEstimate> flow_ftle(const Model& model, const NoiseSchedule& s, const FlowMapSpec& spec, const Tensor& x,
                                    const PowerIterationOptions& opt) {
  const FlowMap<Model> phi(model, s, spec);
  return ftle(phi, phi.horizon_time(), x, opt, spec.t_start, spec.k);
}

struct FtleAverage {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t n_used = 0;
  std::size_t n_nonconverged = 0;
};

/// Mean FTLE over the converged points of a batch, with its standard error.
inline FtleAverage average_ftle(const std::vector<FtleEstimate>& est) {
  FtleAverage a;
  std::vector<double> vals;
  for (const auto& e : est) {
    if (e.converged && std::isfinite(e.ftle)) {
      vals.push_back(e.ftle);
    } else {
      ++a.n_nonconverged;
    }
  }
  a.n_used = vals.size();
  if (vals.empty()) {
    a.mean = std::nan("");
    a.std_error = std::nan("");
    return a;
  }
  double m = 0.0;
  for (double v : vals) m += v;
  m /= static_cast<double>(vals.size());
  double ss = 0.0;
  for (double v : vals) ss += (v - m) * (v - m);
  a.mean = m;
  a.std_error = vals.size() > 1 ? std::sqrt(ss / static_cast<double>(vals.size() - 1) / static_cast<double>(vals.size())) : 0.0;
  return a;
}

template <class Model>
FtleAverage ftle_model_average(const Model& model, const NoiseSchedule& s, const Tensor& x, int t_start, int k,
                               const PowerIterationOptions& opt) {
  return average_ftle(flow_ftle(model, s, FlowMapSpec{t_start, k}, x, opt));
}

/// FNV-1a over the little-endian bytes of the point.
inline std::string hash_point(const Tensor& x) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : x.values()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace jacmatch
