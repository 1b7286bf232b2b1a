#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

#include "jacmatch/tensor.hpp"

namespace jacmatch {

using Rng = std::mt19937_64;

/// Independent stream derived from a base seed and a path of stream labels.
inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream = {}) {
  std::vector<std::uint32_t> words;
  auto push = [&](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push(seed);
  for (auto s : stream) push(s);
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

inline Tensor randn(Shape shape, Rng& rng) {
  Tensor out(std::move(shape));
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : out.values()) v = n(rng);
  return out;
}

inline Tensor rand_uniform(Shape shape, double lo, double hi, Rng& rng) {
  Tensor out(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : out.values()) v = u(rng);
  return out;
}

inline std::vector<int> rand_timesteps(std::size_t n, int T, Rng& rng) {
  std::uniform_int_distribution<int> u(0, T - 1);
  std::vector<int> t(n);
  for (int& v : t) v = u(rng);
  return t;
}

}  // namespace jacmatch
