#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "jacmatch/data.hpp"
#include "jacmatch/diffusion.hpp"

namespace jacmatch {

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double d = a[j] - b[j];
    s += d * d;
  }
  return s;
}

inline void check_sets(const Tensor& X, const Tensor& Y) {
  if (X.rank() != 2 || Y.rank() != 2 || X.rows() == 0 || Y.rows() == 0) throw Error("sample sets must be nonempty batches");
  if (X.cols() != Y.cols()) throw ShapeError("sample sets have different dimensions");
}

/// Sum over j in [begin, Y.rows()) of exp(-gamma ||x - y_j||^2), summed in j order.
inline double kernel_row_sum(std::span<const double> x, const Tensor& Y, std::size_t begin, double gamma,
                             std::vector<double>& buf) {
  const std::size_t n = Y.rows() - begin;
  buf.resize(n);
  for (std::size_t j = 0; j < n; ++j) buf[j] = -gamma * sq_dist(x, Y.row(begin + j));
  for (std::size_t j = 0; j < n; ++j) buf[j] = kernels::exp(buf[j]);
  double s = 0.0;
  for (double v : buf) s += v;
  return s;
}

/// Sum of k(x_i, x_j) over i < j.
inline double kernel_sum_within(const Tensor& X, double gamma) {
  std::vector<double> buf;
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < X.rows(); ++i) s += kernel_row_sum(X.row(i), X, i + 1, gamma, buf);
  return s;
}

inline double kernel_sum_between(const Tensor& X, const Tensor& Y, double gamma) {
  std::vector<double> buf;
  double s = 0.0;
  for (std::size_t i = 0; i < X.rows(); ++i) s += kernel_row_sum(X.row(i), Y, 0, gamma, buf);
  return s;
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw Error("median of empty set");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  const double hi = v[mid];
  if (v.size() % 2) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + mid);
  return 0.5 * (lo + hi);
}

}  // namespace detail

/// Median pairwise Euclidean distance over the first `max_points` rows of X and of Y pooled.
inline double median_heuristic_bandwidth(const Tensor& X, const Tensor& Y, std::size_t max_points = 1000) {
  detail::check_sets(X, Y);
  std::vector<std::span<const double>> pts;
  for (std::size_t i = 0; i < std::min(max_points, X.rows()); ++i) pts.push_back(X.row(i));
  for (std::size_t i = 0; i < std::min(max_points, Y.rows()); ++i) pts.push_back(Y.row(i));
  std::vector<double> d;
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) d.push_back(std::sqrt(detail::sq_dist(pts[i], pts[j])));
  const double h = d.empty() ? 1.0 : detail::median_of(std::move(d));
  return h > 0.0 ? h : 1.0;
}

/// Unbiased MMD^2 with k(x, y) = exp(-||x - y||^2 / (2 h^2)). May be slightly negative.
inline double mmd_rbf(const Tensor& X, const Tensor& Y, double bandwidth) {
  detail::check_sets(X, Y);
  if (!(bandwidth > 0.0)) throw Error("bandwidth must be positive");
  if (X == Y) return 0.0;
  if (X.rows() < 2 || Y.rows() < 2) throw Error("unbiased MMD needs at least two points per set");
  const double gamma = 1.0 / (2.0 * bandwidth * bandwidth);
  const double m = static_cast<double>(X.rows()), n = static_cast<double>(Y.rows());
  const double kxx = 2.0 * detail::kernel_sum_within(X, gamma) / (m * (m - 1.0));
  const double kyy = 2.0 * detail::kernel_sum_within(Y, gamma) / (n * (n - 1.0));
  const double kxy = detail::kernel_sum_between(X, Y, gamma) / (m * n);
  return kxx + kyy - 2.0 * kxy;
}

/// Median pairwise distance within one set.
inline double median_heuristic_bandwidth(const Tensor& X, std::size_t max_points = 1000) {
  detail::check_sets(X, X);
  const std::size_t n = std::min(max_points, X.rows());
  std::vector<double> d;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) d.push_back(std::sqrt(detail::sq_dist(X.row(i), X.row(j))));
  const double h = d.empty() ? 1.0 : detail::median_of(std::move(d));
  return h > 0.0 ? h : 1.0;
}

/// Reference set with its within-set kernel mean precomputed, for comparing many sample sets
/// against the same data.
struct MmdReference {
  Tensor points;
  double bandwidth = 1.0;
  double kyy = 0.0;
};

inline MmdReference make_mmd_reference(Tensor Y, double bandwidth) {
  if (!(bandwidth > 0.0)) throw Error("bandwidth must be positive");
  if (Y.rank() != 2 || Y.rows() < 2) throw Error("unbiased MMD needs at least two points per set");
  const double n = static_cast<double>(Y.rows());
  const double kyy = 2.0 * detail::kernel_sum_within(Y, 1.0 / (2.0 * bandwidth * bandwidth)) / (n * (n - 1.0));
  return {std::move(Y), bandwidth, kyy};
}

/// Same value as mmd_rbf(X, ref.points, ref.bandwidth).
inline double mmd_rbf(const Tensor& X, const MmdReference& ref) {
  const Tensor& Y = ref.points;
  detail::check_sets(X, Y);
  if (X == Y) return 0.0;
  if (X.rows() < 2) throw Error("unbiased MMD needs at least two points per set");
  const double gamma = 1.0 / (2.0 * ref.bandwidth * ref.bandwidth);
  const double m = static_cast<double>(X.rows()), n = static_cast<double>(Y.rows());
  const double kxx = 2.0 * detail::kernel_sum_within(X, gamma) / (m * (m - 1.0));
  const double kxy = detail::kernel_sum_between(X, Y, gamma) / (m * n);
  return kxx + ref.kyy - 2.0 * kxy;
}

/// Biased (V-statistic) MMD^2, exactly zero for identical sets.
inline double mmd_rbf_biased(const Tensor& X, const Tensor& Y, double bandwidth) {
  detail::check_sets(X, Y);
  if (!(bandwidth > 0.0)) throw Error("bandwidth must be positive");
  if (X == Y) return 0.0;
  const double gamma = 1.0 / (2.0 * bandwidth * bandwidth);
  const double m = static_cast<double>(X.rows()), n = static_cast<double>(Y.rows());
  const double kxx = (2.0 * detail::kernel_sum_within(X, gamma) + m) / (m * m);
  const double kyy = (2.0 * detail::kernel_sum_within(Y, gamma) + n) / (n * n);
  const double kxy = detail::kernel_sum_between(X, Y, gamma) / (m * n);
  return kxx + kyy - 2.0 * kxy;
}

/// Exact W1 between two empirical 1-D distributions: integral of |F - G|.
inline double wasserstein1_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw Error("wasserstein1_1d needs nonempty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double prev = std::min(a.front(), b.front());
  double total = 0.0;
  while (i < a.size() || j < b.size()) {
    double x;
    if (j == b.size() || (i < a.size() && a[i] <= b[j])) {
      x = a[i];
    } else {
      x = b[j];
    }
    total += std::abs(i / na - j / nb) * (x - prev);
    prev = x;
    while (i < a.size() && a[i] == x) ++i;
    while (j < b.size() && b[j] == x) ++j;
  }
  return total;
}

/// Mean of 1-D W1 distances over n_proj seeded random unit directions.
inline double sliced_wasserstein(const Tensor& X, const Tensor& Y, std::size_t n_proj, std::uint64_t seed) {
  detail::check_sets(X, Y);
  if (n_proj == 0) throw Error("need at least one projection");
  Rng rng = make_rng(seed, {0x7377ULL});
  const std::size_t d = X.cols();
  double total = 0.0;
  for (std::size_t p = 0; p < n_proj; ++p) {
    Tensor dir = randn(Shape{d}, rng);
    dir = (1.0 / std::sqrt(squared_norm(dir.values()))) * dir;
    std::vector<double> a(X.rows()), b(Y.rows());
    for (std::size_t i = 0; i < X.rows(); ++i) a[i] = dot(X.row(i), dir.values());
    for (std::size_t i = 0; i < Y.rows(); ++i) b[i] = dot(Y.row(i), dir.values());
    total += wasserstein1_1d(std::move(a), std::move(b));
  }
  return total / static_cast<double>(n_proj);
}

struct MeanWithError {
  double mean = 0.0;
  double std_error = 0.0;
};

inline MeanWithError mean_with_error(const std::vector<double>& v) {
  if (v.empty()) throw Error("mean of empty set");
  double m = 0.0;
  for (double a : v) m += a;
  m /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double a : v) ss += (a - m) * (a - m);
  const double n = static_cast<double>(v.size());
  return {m, v.size() > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0};
}

/// 1/2 E || -eps_hat / sqrt(1 - ab_t) - grad log p_t(x_t) ||^2 over x_t drawn from the diffused mixture.
template <class Model>
MeanWithError score_matching_error(const Model& model, const GaussianMixture& g, const NoiseSchedule& s, int t,
                                   std::size_t n, std::uint64_t seed) {
  s.check_t(t);
  if (n == 0) throw Error("score_matching_error needs samples");
  Rng rng = make_rng(seed, {0x736d65ULL, static_cast<std::uint64_t>(t)});
  const Tensor x0 = sample_mixture(g, n, rng);
  const Tensor eps = randn(x0.shape(), rng);
  const Tensor xt = forward_perturb(x0, t, eps, s);
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  const Tensor eps_hat = value_of(model(xt, std::vector<int>(n, t)));
  const Tensor score = (-1.0 / std::sqrt(1.0 - ab)) * eps_hat;
  const Tensor truth = true_score(diffused(g, ab), xt);
  std::vector<double> per(n);
  for (std::size_t i = 0; i < n; ++i) per[i] = 0.5 * detail::sq_dist(score.row(i), truth.row(i));
  return mean_with_error(per);
}

}  // namespace jacmatch
