#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "jacmatch/rng.hpp"

namespace jacmatch {

/// Mixture of isotropic Gaussians N(mean_k, variance_k I) with mixing weights.
struct GaussianMixture {
  std::vector<Tensor> means;
  std::vector<double> variances;
  std::vector<double> weights;

  std::size_t dim() const { return means.empty() ? 0 : means.front().size(); }

  void validate() const {
    if (means.empty()) throw Error("mixture needs at least one component");
    if (variances.size() != means.size() || weights.size() != means.size()) {
      throw Error("mixture component fields have different lengths");
    }
    double total = 0.0;
    for (std::size_t k = 0; k < means.size(); ++k) {
      if (means[k].size() != dim()) throw ShapeError("mixture means have different dimensions");
      if (!(variances[k] > 0.0)) throw Error("mixture variances must be positive");
      if (!(weights[k] >= 0.0)) throw Error("mixture weights must be non-negative");
      total += weights[k];
    }
    if (std::abs(total - 1.0) > 1e-12) throw Error("mixture weights must sum to 1");
  }
};

/// Eight equal-weight components with std 0.1 on the unit circle.
inline GaussianMixture ring8() {
  GaussianMixture g;
  for (int k = 0; k < 8; ++k) {
    const double a = 2.0 * std::numbers::pi * k / 8.0;
    g.means.push_back(Tensor::vector({std::cos(a), std::sin(a)}));
    g.variances.push_back(0.01);
    g.weights.push_back(0.125);
  }
  return g;
}

/// Law of sqrt(ab) x0 + sqrt(1 - ab) eps for x0 from `g`: again a mixture.
inline GaussianMixture diffused(const GaussianMixture& g, double alpha_bar) {
  GaussianMixture out = g;
  const double a = std::sqrt(alpha_bar);
  for (std::size_t k = 0; k < g.means.size(); ++k) {
    out.means[k] = a * g.means[k];
    out.variances[k] = alpha_bar * g.variances[k] + (1.0 - alpha_bar);
  }
  return out;
}

namespace detail {

/// Per-row, per-component log(w_k N(x; mu_k, (var_k + added) I)).
inline std::vector<std::vector<double>> component_log_terms(const GaussianMixture& g, const Tensor& x, double added_var) {
  g.validate();
  if (!(added_var >= 0.0)) throw Error("added noise variance must be non-negative");
  const Tensor xb = as_batch(x);
  if (xb.cols() != g.dim()) throw ShapeError("point dimension does not match mixture");
  const double d = static_cast<double>(g.dim());
  std::vector<std::vector<double>> out(xb.rows(), std::vector<double>(g.means.size()));
  for (std::size_t r = 0; r < xb.rows(); ++r) {
    for (std::size_t k = 0; k < g.means.size(); ++k) {
      const double v = g.variances[k] + added_var;
      double sq = 0.0;
      for (std::size_t j = 0; j < xb.cols(); ++j) {
        const double diff = xb(r, j) - g.means[k][j];
        sq += diff * diff;
      }
      out[r][k] = std::log(g.weights[k]) - 0.5 * d * std::log(2.0 * std::numbers::pi * v) - 0.5 * sq / v;
    }
  }
  return out;
}

inline double logsumexp(const std::vector<double>& v) {
  double m = -INFINITY;
  for (double a : v) m = std::max(m, a);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double a : v) s += std::exp(a - m);
  return m + std::log(s);
}

}  // namespace detail

/// log p(x) per row for the mixture convolved with N(0, added_var I).
inline Tensor log_density(const GaussianMixture& g, const Tensor& x, double added_var = 0.0) {
  const auto terms = detail::component_log_terms(g, x, added_var);
  Tensor out(Shape{terms.size()});
  for (std::size_t r = 0; r < terms.size(); ++r) out[r] = detail::logsumexp(terms[r]);
  return out;
}

/// Exact grad_x log p(x) of the mixture convolved with N(0, added_var I). Shape follows x.
inline Tensor true_score(const GaussianMixture& g, const Tensor& x, double added_var = 0.0) {
  const auto terms = detail::component_log_terms(g, x, added_var);
  const Tensor xb = as_batch(x);
  Tensor out(xb.shape());
  for (std::size_t r = 0; r < xb.rows(); ++r) {
    const double lse = detail::logsumexp(terms[r]);
    for (std::size_t k = 0; k < g.means.size(); ++k) {
      const double resp = std::exp(terms[r][k] - lse);
      const double v = g.variances[k] + added_var;
      for (std::size_t j = 0; j < xb.cols(); ++j) out(r, j) -= resp * (xb(r, j) - g.means[k][j]) / v;
    }
  }
  return out.reshaped(x.shape());
}

inline Tensor sample_mixture(const GaussianMixture& g, std::size_t n, Rng& rng) {
  g.validate();
  std::discrete_distribution<std::size_t> pick(g.weights.begin(), g.weights.end());
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor out(Shape{n, g.dim()});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = pick(rng);
    const double sd = std::sqrt(g.variances[k]);
    for (std::size_t j = 0; j < g.dim(); ++j) out(i, j) = g.means[k][j] + sd * normal(rng);
  }
  return out;
}

enum class DatasetKind { gmm_ring8, two_moons, checkerboard };

inline std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::gmm_ring8: return "gmm_ring8";
    case DatasetKind::two_moons: return "two_moons";
    case DatasetKind::checkerboard: return "checkerboard";
  }
  return "?";
}

inline DatasetKind parse_dataset_kind(const std::string& s) {
  if (s == "gmm_ring8") return DatasetKind::gmm_ring8;
  if (s == "two_moons") return DatasetKind::two_moons;
  if (s == "checkerboard") return DatasetKind::checkerboard;
  throw Error("unknown dataset kind '" + s + "'");
}

/// Two interleaved half annuli with radii in [1 - jitter, 1 + jitter]. Even rows lie on the
/// upper moon centred at (0, 0), odd rows on the lower moon centred at (1, 0.5).
inline constexpr double kMoonJitter = 0.1;

inline Tensor sample_two_moons(std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::uniform_real_distribution<double> radius(1.0 - kMoonJitter, 1.0 + kMoonJitter);
  Tensor out(Shape{n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const double a = angle(rng), r = radius(rng);
    if (i % 2 == 0) {
      out(i, 0) = r * std::cos(a);
      out(i, 1) = r * std::sin(a);
    } else {
      out(i, 0) = 1.0 - r * std::cos(a);
      out(i, 1) = 0.5 - r * std::sin(a);
    }
  }
  return out;
}

/// Uniform on the 8 dark cells of a 4x4 board covering [-2, 2]^2.
inline Tensor sample_checkerboard(std::size_t n, Rng& rng) {
  std::uniform_int_distribution<int> cell(0, 7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor out(Shape{n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const int c = cell(rng);
    const int row = c / 2;
    const int col = 2 * (c % 2) + (row % 2);
    out(i, 0) = -2.0 + col + u(rng);
    out(i, 1) = -2.0 + row + u(rng);
  }
  return out;
}

struct SampleSet {
  Tensor points;
  std::string generator;
  std::uint64_t seed = 0;
};

inline SampleSet sample_dataset(DatasetKind kind, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw Error("dataset size must be at least 1");
  Rng rng = make_rng(seed, {0x64617461ULL, static_cast<std::uint64_t>(kind)});
  Tensor pts;
  switch (kind) {
    case DatasetKind::gmm_ring8: pts = sample_mixture(ring8(), n, rng); break;
    case DatasetKind::two_moons: pts = sample_two_moons(n, rng); break;
    case DatasetKind::checkerboard: pts = sample_checkerboard(n, rng); break;
  }
  return {std::move(pts), to_string(kind), seed};
}

inline SampleSet sample_dataset(const std::string& kind, std::size_t n, std::uint64_t seed) {
  return sample_dataset(parse_dataset_kind(kind), n, seed);
}

/// Mixture behind a dataset kind, if it has one.
inline bool analytic_mixture(DatasetKind kind, GaussianMixture& out) {
  if (kind != DatasetKind::gmm_ring8) return false;
  out = ring8();
  return true;
}

inline void write_points_csv(const std::string& path, const Tensor& pts) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path);
  for (std::size_t j = 0; j < pts.cols(); ++j) f << (j ? ",x" : "x") << j;
  f << "\n";
  char buf[32];
  for (std::size_t i = 0; i < pts.rows(); ++i) {
    for (std::size_t j = 0; j < pts.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", pts(i, j));
      f << (j ? "," : "") << buf;
    }
    f << "\n";
  }
}

inline Tensor read_points_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open " + path);
  std::string line;
  std::getline(f, line);
  std::size_t cols = 1;
  for (char c : line) cols += c == ',';
  std::vector<double> vals;
  std::size_t rows = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::size_t pos = 0, n = 0;
    while (pos <= line.size()) {
      const auto next = line.find(',', pos);
      vals.push_back(std::stod(line.substr(pos, next - pos)));
      ++n;
      if (next == std::string::npos) break;
      pos = next + 1;
    }
    if (n != cols) throw Error("ragged row in " + path);
    ++rows;
  }
  return Tensor(Shape{rows, cols}, std::move(vals));
}

}  // namespace jacmatch
