#include <Eigen/Dense>

#include "helpers.hpp"

using namespace jmtest;

namespace {

// tests/oracles/ftle.py, default schedule
constexpr double kZeroLambda99k10 = 8.3249449078898912956;
constexpr double kZeroFtle99k10 = 10.596282090868633576;
constexpr double kZeroFtle50k5 = 5.128738054516942993;

/// x -> x A^T for a fixed matrix A, as a generic map.
struct LinearMap {
  Tensor weight;
  explicit LinearMap(const Tensor& A) : weight(kernels::transpose(A)) {}
  template <class X>
  X operator()(const X& x) const {
    return matmul(x, weight);
  }
};

struct IdentityMap {
  template <class X>
  X operator()(const X& x) const {
    return x;
  }
};

Eigen::MatrixXd to_eigen(const Tensor& A) {
  Eigen::MatrixXd m(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) m(i, j) = A(i, j);
  return m;
}

PowerIterationOptions tight() {
  PowerIterationOptions o;
  o.max_iters = 5000;
  o.tol = 1e-14;
  o.seed = 3;
  return o;
}

ScoreNetwork trained_toy() {
  const NoiseSchedule s = ScheduleConfig{}.make();
  const Tensor data = sample_dataset(DatasetKind::gmm_ring8, 5000, 1).points;
  return train_dense(DenseSettings{small_arch(Activation::silu, {64, 64}, 16), 1500, 2e-3, 256}, s, data, 2).net;
}

}  // namespace

TEST(Sensitivity, ZeroModelGivesScheduleRatio) {
  const NoiseSchedule s = ScheduleConfig{}.make();
  const FlowMap<ZeroModel> phi(ZeroModel{}, s, FlowMapSpec{99, 10});
  Rng rng = make_rng(1);
  const Tensor x = randn(Shape{5, 2}, rng);
  for (int i = 0; i < 5; ++i) {
    Tensor v = randn(Shape{2}, rng);
    v = (1.0 / std::sqrt(squared_norm(v.values()))) * v;
    const Tensor q = directional_sensitivity(phi, x, v);
    for (std::size_t r = 0; r < 5; ++r) EXPECT_NEAR(q[r] / kZeroLambda99k10, 1.0, 1e-12);
  }
}

TEST(Sensitivity, IdentityJacobianGivesOne) {
  const Tensor v = Tensor::vector({0.6, 0.8});
  EXPECT_NEAR(directional_sensitivity(IdentityMap{}, Tensor::matrix({{3, 1}}), v)[0], 1.0, 1e-15);
  // one DDIM step of eps = c x with c chosen so the step gain is exactly one
  const NoiseSchedule s = ScheduleConfig{}.make();
  const double a = s.alpha_bar[40], ap = s.alpha_bar[39];
  const double c = (1.0 - std::sqrt(ap / a)) / (std::sqrt(1.0 - ap) - std::sqrt(ap / a) * std::sqrt(1.0 - a));
  const LinearModel m(Tensor::matrix({{c, 0}, {0, c}}));
  const FlowMap<LinearModel> phi(m, s, FlowMapSpec{40, 1});
  EXPECT_NEAR(directional_sensitivity(phi, Tensor::matrix({{3, 1}}), v)[0], 1.0, 1e-12);
}

TEST(Sensitivity, MatchesFlowMapPerturbation) {
  const NoiseSchedule s = ScheduleConfig{}.make();
  const auto net = bind(random_net(2, small_arch(Activation::silu, {32, 32}, 8)));
  const FlowMap phi(net, s, FlowMapSpec{99, 10});
  Rng rng = make_rng(3);
  for (int i = 0; i < 10; ++i) {
    const Tensor x = randn(Shape{1, 2}, rng);
    Tensor v = randn(Shape{2}, rng);
    v = (1.0 / std::sqrt(squared_norm(v.values()))) * v;
    const double h = 1e-5;
    const Tensor d = phi(x + h * Tensor(Shape{1, 2}, {v[0], v[1]})) - phi(x);
    EXPECT_LT(rel_err(directional_sensitivity(phi, x, v)[0], squared_norm(d.values()) / (h * h)), 1e-3);
  }
}

TEST(PowerIteration, DiagonalExample) {
  const auto r = max_singular_value_sq(LinearMap(Tensor::matrix({{2, 0}, {0, 0.5}})), Tensor::matrix({{1, 1}}), tight());
  EXPECT_TRUE(r[0].converged);
  EXPECT_NEAR(r[0].lambda_max, 4.0, 1e-12);
}

TEST(PowerIteration, OrthogonalGivesOne) {
  const double th = 0.7;
  const LinearMap rot(Tensor::matrix({{std::cos(th), -std::sin(th)}, {std::sin(th), std::cos(th)}}));
  const auto r = max_singular_value_sq(rot, Tensor::matrix({{1, 1}}), PowerIterationOptions{});
  EXPECT_TRUE(r[0].converged);
  EXPECT_NEAR(r[0].lambda_max, 1.0, 1e-14);
}

TEST(PowerIteration, RandomLinearFlowsMatchDenseEigensolver) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng = make_rng(seed, {4});
    const Tensor A = randn(Shape{6, 6}, rng);
    const Eigen::MatrixXd M = to_eigen(A);
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M.transpose() * M);
    const double expect = es.eigenvalues().maxCoeff();
    const auto r = max_singular_value_sq(LinearMap(A), randn(Shape{1, 6}, rng), tight());
    EXPECT_LT(rel_err(r[0].lambda_max, expect), 1e-8) << "seed " << seed << " iters " << r[0].iterations;
  }
}

TEST(PowerIteration, NonConvergenceIsReportedNotThrown) {
  Rng rng = make_rng(5);
  const Tensor A = randn(Shape{6, 6}, rng);
  PowerIterationOptions o;
  o.max_iters = 1;
  const auto r = max_singular_value_sq(LinearMap(A), randn(Shape{3, 6}, rng), o);
  for (const auto& e : r) EXPECT_FALSE(e.converged);
  o.max_iters = 0;
  EXPECT_THROW(max_singular_value_sq(LinearMap(A), randn(Shape{1, 6}, rng), o), Error);
  o.max_iters = 10;
  o.tol = 0;
  EXPECT_THROW(max_singular_value_sq(LinearMap(A), randn(Shape{1, 6}, rng), o), Error);
}

TEST(PowerIteration, RayleighBoundOverRandomProbes) {
  const NoiseSchedule s = ScheduleConfig{}.make();
  const auto net = bind(random_net(6, small_arch(Activation::tanh, {32, 32}, 8)));
  const FlowMap phi(net, s, FlowMapSpec{99, 10});
  const Tensor x = Tensor::matrix({{0.2, -0.4}});
  const double lam = max_singular_value_sq(phi, x, tight())[0].lambda_max;
  Rng rng = make_rng(7);
  for (int i = 0; i < 100; ++i) {
    Tensor v = randn(Shape{2}, rng);
    v = (1.0 / std::sqrt(squared_norm(v.values()))) * v;
    EXPECT_LE(directional_sensitivity(phi, x, v)[0], lam * (1 + 1e-12));
  }
}

TEST(Ftle, ContinuousDiagonalSystem) {
  // x' = diag(a, -b) x over t1 is x -> diag(e^{a t1}, e^{-b t1}) x
  const double a = 0.5, b = 1.0;
  for (double t1 : {2.0, 4.0}) {
    const LinearMap flow(Tensor::matrix({{std::exp(a * t1), 0}, {0, std::exp(-b * t1)}}));
    const auto e = ftle(flow, t1, Tensor::matrix({{0.3, 0.3}}), PowerIterationOptions{});
    EXPECT_TRUE(e[0].converged);
    EXPECT_LT(std::abs(e[0].ftle - 0.5), 1e-3) << t1;
  }
}

TEST(Ftle, LinearFlowsMatchSvd) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng = make_rng(seed, {8});
    const Tensor A = randn(Shape{6, 6}, rng);
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(A));
    const double t1 = 0.3;
    const auto e = ftle(LinearMap(A), t1, randn(Shape{1, 6}, rng), tight());
    EXPECT_LT(rel_err(e[0].ftle, std::log(svd.singularValues()(0)) / t1), 1e-8) << seed;
  }
}

TEST(Ftle, ZeroModelMatchesScheduleClosedForm) {
  const NoiseSchedule s = ScheduleConfig{}.make();
  const Tensor x = Tensor::matrix({{0.5, -1.0}, {2.0, 0.1}});
  for (auto [t, k, expect] : {std::tuple{99, 10, kZeroFtle99k10}, std::tuple{50, 5, kZeroFtle50k5}}) {
    const auto est = flow_ftle(ZeroModel{}, s, FlowMapSpec{t, k}, x, PowerIterationOptions{});
    for (const auto& e : est) {
      EXPECT_TRUE(e.converged);
      EXPECT_LT(rel_err(e.ftle, expect), 1e-10);
      EXPECT_DOUBLE_EQ(e.horizon_time, k / 100.0);
      EXPECT_EQ(e.t_start, t);
      EXPECT_EQ(e.k, k);
    }
  }
}

TEST(Ftle, BatchedEqualsSerialBitForBit) {
  const NoiseSchedule s = ScheduleConfig{}.make();
  const auto net = bind(random_net(9, small_arch(Activation::silu, {32, 32}, 8)));
  Rng rng = make_rng(10);
  const Tensor x = randn(Shape{12, 2}, rng);
  PowerIterationOptions o;
  o.max_iters = 200;
  const auto all = flow_ftle(net, s, FlowMapSpec{99, 10}, x, o);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto one = flow_ftle(net, s, FlowMapSpec{99, 10}, Tensor(Shape{1, 2}, {x.row(i).begin(), x.row(i).end()}), o);
    EXPECT_EQ(one[0].lambda_max, all[i].lambda_max);
    EXPECT_EQ(one[0].iterations, all[i].iterations);
    EXPECT_EQ(one[0].converged, all[i].converged);
  }
}

TEST(Ftle, TrainedModelStableAcrossRestarts) {
  const ScoreNetwork net = trained_toy();
  const auto m = bind(net);
  const NoiseSchedule s = ScheduleConfig{}.make();
  Rng rng = make_rng(11);
  const Tensor x = randn(Shape{16, 2}, rng);
  std::vector<std::vector<FtleEstimate>> runs;
  for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
    PowerIterationOptions o;
    o.max_iters = 2000;
    o.tol = 1e-12;
    o.seed = seed;
    runs.push_back(flow_ftle(m, s, FlowMapSpec{99, 10}, x, o));
  }
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double lo = 1e300, hi = -1e300;
    for (const auto& r : runs) {
      ASSERT_TRUE(r[i].converged);
      lo = std::min(lo, r[i].ftle);
      hi = std::max(hi, r[i].ftle);
    }
    EXPECT_LT(hi - lo, 1e-4) << "point " << i;
  }
}

TEST(FtleAverage, SinglePointAndDuplicatedBatch) {
  const NoiseSchedule s = ScheduleConfig{}.make();
  const auto net = bind(random_net(12, small_arch(Activation::tanh, {16, 16}, 4)));
  const Tensor one = Tensor::matrix({{0.4, 0.9}});
  PowerIterationOptions o;
  o.max_iters = 500;
  const auto single = flow_ftle(net, s, FlowMapSpec{99, 10}, one, o);
  ASSERT_TRUE(single[0].converged);
  EXPECT_EQ(ftle_model_average(net, s, one, 99, 10, o).mean, single[0].ftle);
  Rng rng = make_rng(13);
  const Tensor x = randn(Shape{6, 2}, rng);
  std::vector<double> v(x.values().begin(), x.values().end());
  v.insert(v.end(), x.values().begin(), x.values().end());
  const FtleAverage a = ftle_model_average(net, s, x, 99, 10, o);
  const FtleAverage b = ftle_model_average(net, s, Tensor(Shape{12, 2}, v), 99, 10, o);
  EXPECT_NEAR(a.mean, b.mean, 1e-14);
  EXPECT_EQ(b.n_used, 2 * a.n_used);
}

TEST(FtleAverage, SkipsAndCountsNonConverged) {
  std::vector<FtleEstimate> est(4);
  for (int i = 0; i < 4; ++i) {
    est[i].ftle = i;
    est[i].converged = i != 2;
  }
  const FtleAverage a = average_ftle(est);
  EXPECT_EQ(a.n_used, 3u);
  EXPECT_EQ(a.n_nonconverged, 1u);
  EXPECT_NEAR(a.mean, 4.0 / 3.0, 1e-15);
  for (auto& e : est) e.converged = false;
  EXPECT_TRUE(std::isnan(average_ftle(est).mean));
}

TEST(FtleRecords, PointHashIsStableAndDistinguishing) {
  const Tensor a = Tensor::vector({0.1, 0.2});
  EXPECT_EQ(hash_point(a), hash_point(Tensor::vector({0.1, 0.2})));
  EXPECT_NE(hash_point(a), hash_point(Tensor::vector({0.2, 0.1})));
  EXPECT_EQ(hash_point(a).size(), 16u);
}
