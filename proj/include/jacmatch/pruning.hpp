#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <tuple>
#include <vector>

#include "jacmatch/losses.hpp"
#include "jacmatch/scorenet.hpp"

namespace jacmatch {

enum class PruneMethod { random, magnitude, lamp, taylor };

inline std::string to_string(PruneMethod m) {
  switch (m) {
    case PruneMethod::random: return "random";
    case PruneMethod::magnitude: return "magnitude";
    case PruneMethod::lamp: return "lamp";
    case PruneMethod::taylor: return "taylor";
  }
  return "?";
}

inline PruneMethod parse_prune_method(const std::string& s) {
  if (s == "random") return PruneMethod::random;
  if (s == "magnitude") return PruneMethod::magnitude;
  if (s == "lamp") return PruneMethod::lamp;
  if (s == "taylor") return PruneMethod::taylor;
  throw Error("unknown pruning method '" + s + "'");
}

struct UnitScore {
  std::size_t layer = 0;
  std::size_t unit = 0;
  double score = 0.0;
};

using ImportanceScores = std::vector<UnitScore>;

namespace detail {

/// Sum of |w| over a hidden unit's incoming column (including time-embedding rows),
/// its bias, and its outgoing row, counting only weights attached to active units.
inline std::vector<std::vector<double>> unit_magnitudes(const ScoreNetwork& net) {
  const auto shapes = layer_shapes(net.arch);
  const Tensor p = effective_params(net);
  const std::size_t hidden = net.arch.hidden_widths.size();
  std::vector<std::vector<double>> out(hidden);
  for (std::size_t l = 0; l < hidden; ++l) {
    const LayerShape& in = shapes[l];
    const LayerShape& next = shapes[l + 1];
    out[l].assign(in.out, 0.0);
    for (std::size_t u = 0; u < in.out; ++u) {
      double s = std::abs(p[in.bias_offset + u]);
      for (std::size_t r = 0; r < in.in; ++r) s += std::abs(p[in.weight_offset + r * in.out + u]);
      for (std::size_t c = 0; c < next.out; ++c) s += std::abs(p[next.weight_offset + u * next.out + c]);
      out[l][u] = s;
    }
  }
  return out;
}

}  // namespace detail

/// Taylor importance |sum over batch of g_u a_u| with a_u the unit's post-activation output
/// and g_u the NP-loss gradient with respect to it.
inline std::vector<std::vector<double>> taylor_unit_scores(const ScoreNetwork& net, const NoisyBatch& calib) {
  if (calib.t.empty()) throw Error("taylor importance needs a nonempty calibration batch");
  Tape tape;
  Var p = tape.leaf(net.params);
  const auto bound = bind(net, p);
  std::vector<Var> hidden;
  Var y = bound.run(calib.xt, calib.t, &hidden);
  tape.backward(mean_sq_row_norm(y - calib.eps));
  std::vector<std::vector<double>> out;
  for (const Var& h : hidden) {
    const Tensor g = tape.grad(h);
    const Tensor& a = h.value();
    std::vector<double> s(a.cols(), 0.0);
    for (std::size_t b = 0; b < a.rows(); ++b)
      for (std::size_t u = 0; u < a.cols(); ++u) s[u] += g(b, u) * a(b, u);
    for (double& v : s) v = std::abs(v);
    out.push_back(std::move(s));
  }
  return out;
}

/// LAMP: within a layer, sort scores ascending; unit i gets s_i^2 / sum_{j >= i} s_j^2.
inline std::vector<double> lamp_normalize(const std::vector<double>& s) {
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] < s[b]; });
  std::vector<double> out(s.size(), 0.0);
  double tail = 0.0;
  for (std::size_t i = order.size(); i-- > 0;) {
    const double sq = s[order[i]] * s[order[i]];
    tail += sq;
    out[order[i]] = tail > 0.0 ? sq / tail : 0.0;
  }
  return out;
}

/// One score per active hidden unit. `calib` is only read by the taylor method.
inline ImportanceScores importance_scores(PruneMethod method, const ScoreNetwork& net, const NoisyBatch* calib,
                                          std::uint64_t seed) {
  net.validate();
  std::vector<std::vector<double>> per_layer;
  switch (method) {
    case PruneMethod::random: {
      Rng rng = make_rng(seed, {0x72616e64ULL});
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (std::size_t w : net.arch.hidden_widths) {
        std::vector<double> s(w);
        for (double& v : s) v = u(rng);
        per_layer.push_back(std::move(s));
      }
      break;
    }
    case PruneMethod::magnitude: per_layer = detail::unit_magnitudes(net); break;
    case PruneMethod::lamp: {
      per_layer = detail::unit_magnitudes(net);
      for (std::size_t l = 0; l < per_layer.size(); ++l) {
        std::vector<double> active;
        for (std::size_t u = 0; u < per_layer[l].size(); ++u)
          if (net.unit_active(l, u)) active.push_back(per_layer[l][u]);
        const auto norm = lamp_normalize(active);
        std::size_t k = 0;
        for (std::size_t u = 0; u < per_layer[l].size(); ++u)
          if (net.unit_active(l, u)) per_layer[l][u] = norm[k++];
      }
      break;
    }
    case PruneMethod::taylor:
      if (!calib) throw Error("taylor importance needs a calibration batch");
      per_layer = taylor_unit_scores(net, *calib);
      break;
  }
  ImportanceScores out;
  for (std::size_t l = 0; l < per_layer.size(); ++l) {
    for (std::size_t u = 0; u < per_layer[l].size(); ++u) {
      if (!net.unit_active(l, u)) continue;
      const double s = per_layer[l][u];
      if (!std::isfinite(s) || s < 0.0) throw NonFiniteError("importance score is not a finite non-negative number");
      out.push_back({l, u, s});
    }
  }
  return out;
}

/// Parameters attached to hidden unit (l, u) given the current masks: incoming weights from
/// active units and the embedding, its bias, outgoing weights to active units.
inline std::size_t unit_param_share(const ScoreNetwork& net, std::size_t l, std::size_t u) {
  (void)u;
  const auto& a = net.arch;
  const std::size_t prev = l == 0 ? a.input_dim : net.active_width(l - 1);
  const std::size_t next = l + 1 < a.hidden_widths.size() ? net.active_width(l + 1) : a.input_dim;
  return prev + a.time_embed_dim + 1 + next;
}

struct PruningPlan {
  PruneMethod method = PruneMethod::magnitude;
  double target_ratio = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::uint8_t>> masks;
  double achieved_ratio = 0.0;
  double mac_ratio = 0.0;
  std::size_t removed_units = 0;
};

inline double param_ratio(const ScoreNetwork& dense, const ScoreNetwork& pruned) {
  return 1.0 - static_cast<double>(param_count(pruned)) / static_cast<double>(param_count(dense));
}

inline double mac_ratio(const ScoreNetwork& dense, const ScoreNetwork& pruned) {
  return 1.0 - static_cast<double>(mac_count(pruned)) / static_cast<double>(mac_count(dense));
}

/// Removes units in ascending (score, layer, unit) order, keeping at least one unit per layer.
/// Stops before the removal that would overshoot the target by more than it currently falls
/// short, so the removed set is a prefix of one fixed order and grows with the target.
inline ScoreNetwork prune_to_ratio(const ScoreNetwork& net, const ImportanceScores& scores, double target_ratio,
                                   PruningPlan* plan = nullptr) {
  if (!(target_ratio > 0.0 && target_ratio < 1.0)) throw Error("target ratio must lie in (0, 1)");
  net.validate();
  ScoreNetwork out = net;
  if (!out.has_masks()) {
    for (std::size_t w : net.arch.hidden_widths) out.masks.emplace_back(w, 1);
  }
  ImportanceScores order = scores;
  std::sort(order.begin(), order.end(), [](const UnitScore& a, const UnitScore& b) {
    return std::tie(a.score, a.layer, a.unit) < std::tie(b.score, b.layer, b.unit);
  });
  const double dense = static_cast<double>(param_count(net.arch));
  double current = static_cast<double>(param_count(out));
  std::size_t removed = 0;
  bool reached = 1.0 - current / dense >= target_ratio;
  for (const UnitScore& s : order) {
    if (reached) break;
    if (s.layer >= out.masks.size() || s.unit >= out.masks[s.layer].size()) throw Error("score refers to a missing unit");
    if (!out.masks[s.layer][s.unit] || out.active_width(s.layer) <= 1) continue;
    const double share = static_cast<double>(unit_param_share(out, s.layer, s.unit));
    const double before = 1.0 - current / dense;
    const double after = 1.0 - (current - share) / dense;
    if (after >= target_ratio) {
      reached = true;
      if (after - target_ratio >= target_ratio - before) break;
    }
    out.masks[s.layer][s.unit] = 0;
    current -= share;
    ++removed;
  }
  if (!reached) throw Error("target ratio is unreachable with one unit kept per layer");
  if (plan) {
    plan->target_ratio = target_ratio;
    plan->masks = out.masks;
    plan->achieved_ratio = 1.0 - static_cast<double>(param_count(out)) / dense;
    plan->mac_ratio = 1.0 - static_cast<double>(mac_count(out)) / static_cast<double>(mac_count(ScoreNetwork{net.arch, {}, {}}));
    plan->removed_units = removed;
  }
  return out;
}

}  // namespace jacmatch
