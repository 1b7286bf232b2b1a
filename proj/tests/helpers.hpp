#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <string>

#include "jacmatch/jacmatch.hpp"

namespace jmtest {

using namespace jacmatch;

/// ||a - b|| / ||b|| (absolute when b vanishes).
inline double rel_err(const Tensor& a, const Tensor& b) {
  const Tensor d = a - b;
  const double nb = std::sqrt(squared_norm(b.values()));
  const double nd = std::sqrt(squared_norm(d.values()));
  return nb > 0 ? nd / nb : nd;
}

inline double rel_err(double a, double b) { return b != 0 ? std::abs(a - b) / std::abs(b) : std::abs(a); }

inline Architecture small_arch(Activation act = Activation::tanh, std::vector<std::size_t> widths = {16, 16},
                               std::size_t embed = 4) {
  Architecture a;
  a.hidden_widths = std::move(widths);
  a.time_embed_dim = embed;
  a.activation = act;
  return a;
}

inline ScoreNetwork random_net(std::uint64_t seed, const Architecture& arch = small_arch()) {
  Rng rng = make_rng(seed, {0x7465737400ULL});
  ScoreNetwork net = init_network(arch, rng);
  // nonzero biases so every code path matters
  Rng b = make_rng(seed, {0x7465737401ULL});
  for (const LayerShape& s : layer_shapes(arch))
    for (std::size_t j = 0; j < s.out; ++j) net.params[s.bias_offset + j] = 0.3 * randn(Shape{1}, b)[0];
  return net;
}

/// x -> net(x, t) for a fixed timestep, generic over the algebra.
struct AtTime {
  BoundNetwork<Tensor> net;
  int t;
  template <class X>
  auto operator()(const X& x) const {
    return net(x, std::vector<int>(value_of(x).rows(), t));
  }
};

inline AtTime at_time(const ScoreNetwork& net, int t) { return {bind(net), t}; }

inline GaussianMixture single_gaussian(std::vector<double> mean, double var) {
  GaussianMixture g;
  const std::size_t d = mean.size();
  g.means = {Tensor(Shape{d}, std::move(mean))};
  g.variances = {var};
  g.weights = {1.0};
  return g;
}

/// The optimal noise predictor for a known mixture: -sqrt(1 - ab_t) grad log p_t(x).
struct ExactEps {
  GaussianMixture g;
  const NoiseSchedule* s;
  // rows must share one timestep, as in sampling
  Tensor operator()(const Tensor& x, const std::vector<int>& t) const {
    for (int ti : t)
      if (ti != t.front()) throw Error("ExactEps expects a common timestep");
    const double ab = s->alpha_bar_at(t.front());
    return (-std::sqrt(1.0 - ab)) * true_score(diffused(g, ab), x);
  }
};

inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("jacmatch_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace jmtest
