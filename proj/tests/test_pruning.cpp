#include "helpers.hpp"

using namespace jmtest;

namespace {

// tests/oracles/pruning.py
constexpr double kLamp[6] = {0.08490566037735849, 0.00861994655633135, 0.16494845360824742,
                             0.01956351621598122, 1.0,                 0.059950336998935795};

NoisyBatch calib_batch(std::size_t n, std::uint64_t seed) {
  const NoiseSchedule s = ScheduleConfig{}.make();
  Rng rng = make_rng(seed);
  const Tensor data = sample_dataset(DatasetKind::gmm_ring8, 500, seed).points;
  return perturb(draw_noise_batch(data, n, s.T, rng), s);
}

ImportanceScores fixed_scores() {
  return {{0, 0, 0.5}, {0, 1, 0.1}, {0, 2, 0.9}, {0, 3, 0.3}, {1, 0, 0.2}, {1, 1, 0.4}, {1, 2, 0.05}};
}

std::vector<std::vector<std::uint8_t>> masks_removing(const Architecture& a, std::vector<std::pair<int, int>> units) {
  std::vector<std::vector<std::uint8_t>> m;
  for (std::size_t w : a.hidden_widths) m.emplace_back(w, 1);
  for (auto [l, u] : units) m[l][u] = 0;
  return m;
}

double max_unit_share(const Architecture& a) {
  std::size_t best = 0;
  for (std::size_t l = 0; l < a.hidden_widths.size(); ++l) {
    const std::size_t prev = l == 0 ? a.input_dim : a.hidden_widths[l - 1];
    const std::size_t next = l + 1 < a.hidden_widths.size() ? a.hidden_widths[l + 1] : a.input_dim;
    best = std::max(best, prev + a.time_embed_dim + 1 + next);
  }
  return static_cast<double>(best) / param_count(a);
}

}  // namespace

TEST(Importance, MagnitudeExample) {
  Architecture a;
  a.hidden_widths = {2};
  a.time_embed_dim = 0;
  ScoreNetwork n{a, Tensor(Shape{param_count(a)}), {}};
  const LayerShape l0 = layer_shapes(a)[0];
  // incoming weights of unit 0: (1, 1); of unit 1: (3, 3)
  n.params[l0.weight_offset + 0] = 1;
  n.params[l0.weight_offset + 2] = 1;
  n.params[l0.weight_offset + 1] = 3;
  n.params[l0.weight_offset + 3] = 3;
  const ImportanceScores s = importance_scores(PruneMethod::magnitude, n, nullptr, 0);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].score, 2.0);
  EXPECT_EQ(s[1].score, 6.0);
  const ScoreNetwork p = prune_to_ratio(n, s, 0.3);
  EXPECT_EQ(p.masks[0], (std::vector<std::uint8_t>{0, 1}));
}

TEST(Importance, MagnitudeCountsBiasAndOutgoingWeights) {
  const ScoreNetwork n = random_net(1, small_arch(Activation::silu, {5, 4}, 2));
  const auto sh = layer_shapes(n.arch);
  const ImportanceScores s = importance_scores(PruneMethod::magnitude, n, nullptr, 0);
  for (const UnitScore& u : s) {
    double e = std::abs(n.params[sh[u.layer].bias_offset + u.unit]);
    for (std::size_t r = 0; r < sh[u.layer].in; ++r) e += std::abs(n.params[sh[u.layer].weight_offset + r * sh[u.layer].out + u.unit]);
    const LayerShape& nx = sh[u.layer + 1];
    for (std::size_t c = 0; c < nx.out; ++c) e += std::abs(n.params[nx.weight_offset + u.unit * nx.out + c]);
    EXPECT_NEAR(u.score, e, 1e-12);
  }
}

TEST(Importance, RandomIsSeededAndDeterministic) {
  const ScoreNetwork n = random_net(2);
  const auto a = importance_scores(PruneMethod::random, n, nullptr, 17);
  const auto b = importance_scores(PruneMethod::random, n, nullptr, 17);
  const auto c = importance_scores(PruneMethod::random, n, nullptr, 18);
  ASSERT_EQ(a.size(), 32u);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].score, b[i].score);
    differs |= a[i].score != c[i].score;
  }
  EXPECT_TRUE(differs);
}

TEST(Importance, LampMatchesReference) {
  const auto got = lamp_normalize({3.0, 1.0, 4.0, 1.5, 9.0, 2.6});
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(got[i], kLamp[i], 1e-15);
}

TEST(Importance, LampLargestUnitPerLayerScoresOne) {
  const ScoreNetwork n = random_net(3, small_arch(Activation::tanh, {6, 7}, 2));
  const auto s = importance_scores(PruneMethod::lamp, n, nullptr, 0);
  double best[2] = {0, 0};
  for (const auto& u : s) {
    EXPECT_GT(u.score, 0.0);
    EXPECT_LE(u.score, 1.0);
    best[u.layer] = std::max(best[u.layer], u.score);
  }
  EXPECT_EQ(best[0], 1.0);
  EXPECT_EQ(best[1], 1.0);
}

TEST(Importance, TaylorZeroForUnitWithoutOutgoingWeights) {
  ScoreNetwork n = random_net(4, small_arch(Activation::silu, {6, 5}, 4));
  const LayerShape next = layer_shapes(n.arch)[1];
  for (std::size_t c = 0; c < next.out; ++c) n.params[next.weight_offset + 2 * next.out + c] = 0.0;
  const NoisyBatch cb = calib_batch(64, 5);
  const auto s = importance_scores(PruneMethod::taylor, n, &cb, 0);
  for (const auto& u : s) {
    if (u.layer == 0 && u.unit == 2) {
      EXPECT_EQ(u.score, 0.0);
    } else {
      EXPECT_GT(u.score, 0.0);
    }
  }
}

TEST(Importance, TaylorEqualsDerivativeOfUnitScaling) {
  // sum_b g_u a_u = d/d alpha of the loss when unit u's output is scaled by alpha, at alpha = 1
  const ScoreNetwork n = random_net(6, small_arch(Activation::tanh, {6, 5}, 4));
  const NoisyBatch cb = calib_batch(32, 7);
  const auto s = importance_scores(PruneMethod::taylor, n, &cb, 0);
  const auto sh = layer_shapes(n.arch);
  auto loss = [&](const ScoreNetwork& m) { return mean_sq_row_norm(bind(m)(cb.xt, cb.t) - cb.eps).item(); };
  for (const auto& u : s) {
    const LayerShape& nx = sh[u.layer + 1];
    auto scaled = [&](double alpha) {
      ScoreNetwork m = n;
      for (std::size_t c = 0; c < nx.out; ++c) m.params[nx.weight_offset + u.unit * nx.out + c] *= alpha;
      return loss(m);
    };
    const double h = 1e-6;
    const double fd = (scaled(1 + h) - scaled(1 - h)) / (2 * h);
    EXPECT_NEAR(u.score, std::abs(fd), 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST(Importance, TaylorNeedsCalibration) {
  const ScoreNetwork n = random_net(8);
  EXPECT_THROW(importance_scores(PruneMethod::taylor, n, nullptr, 0), Error);
  const NoisyBatch empty{Tensor(Shape{0, 2}), {}, Tensor(Shape{0, 2})};
  EXPECT_THROW(importance_scores(PruneMethod::taylor, n, &empty, 0), Error);
}

TEST(Importance, ScoresOnlyActiveUnits) {
  ScoreNetwork n = random_net(9);
  n.masks = masks_removing(n.arch, {{0, 3}, {1, 0}, {1, 5}});
  for (PruneMethod m : {PruneMethod::random, PruneMethod::magnitude, PruneMethod::lamp}) {
    const auto s = importance_scores(m, n, nullptr, 1);
    EXPECT_EQ(s.size(), 29u);
    for (const auto& u : s) EXPECT_TRUE(n.unit_active(u.layer, u.unit));
  }
}

TEST(Prune, GreedyMatchesReferenceOrder) {
  const Architecture a = small_arch(Activation::silu, {4, 3}, 2);
  const ScoreNetwork n = random_net(10, a);
  struct Case {
    double target;
    std::vector<std::pair<int, int>> removed;
    double ratio;
  };
  for (const Case& c : {Case{0.2, {{1, 2}}, 0.18367346938775508}, Case{0.35, {{1, 2}, {0, 1}}, 0.326530612244898},
                        Case{0.5, {{1, 2}, {0, 1}, {1, 0}}, 0.4897959183673469}}) {
    PruningPlan plan;
    const ScoreNetwork p = prune_to_ratio(n, fixed_scores(), c.target, &plan);
    EXPECT_EQ(p.masks, masks_removing(a, c.removed)) << c.target;
    EXPECT_NEAR(plan.achieved_ratio, c.ratio, 1e-15);
    EXPECT_EQ(plan.removed_units, c.removed.size());
  }
}

TEST(Prune, TinyTargetRemovesNothing) {
  const ScoreNetwork n = random_net(11);
  const ScoreNetwork p = prune_to_ratio(n, importance_scores(PruneMethod::magnitude, n, nullptr, 0), 1e-9);
  EXPECT_EQ(param_count(p), param_count(n));
}

TEST(Prune, UniformScoresBreakTiesByLayerThenUnit) {
  const Architecture a = small_arch(Activation::silu, {4, 3}, 2);
  const ScoreNetwork n = random_net(12, a);
  ImportanceScores s;
  for (std::size_t l : {1u, 0u})
    for (std::size_t u = a.hidden_widths[l]; u-- > 0;) s.push_back({l, u, 1.0});
  const ScoreNetwork p = prune_to_ratio(n, s, 0.3);
  EXPECT_EQ(p.masks, masks_removing(a, {{0, 0}, {0, 1}}));
  EXPECT_EQ(prune_to_ratio(n, s, 0.3).masks, p.masks);
}

TEST(Prune, AchievedRatioWithinOneUnitOfTargetOnRandomNets) {
  Rng rng = make_rng(13);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<std::size_t> widths(std::uniform_int_distribution<int>(1, 4)(rng));
    for (auto& w : widths) w = std::uniform_int_distribution<std::size_t>(4, 40)(rng);
    const Architecture a = small_arch(Activation::silu, widths, 2 * std::uniform_int_distribution<std::size_t>(0, 4)(rng));
    const ScoreNetwork n = random_net(300 + rep, a);
    const double target = std::uniform_real_distribution<double>(0.05, 0.6)(rng);
    const auto method = static_cast<PruneMethod>(rep % 3);
    PruningPlan plan;
    const ScoreNetwork p = prune_to_ratio(n, importance_scores(method, n, nullptr, rep), target, &plan);
    EXPECT_LE(std::abs(plan.achieved_ratio - target), max_unit_share(a)) << "rep " << rep;
    EXPECT_DOUBLE_EQ(plan.achieved_ratio, param_ratio(n, p));
    EXPECT_DOUBLE_EQ(plan.mac_ratio, mac_ratio(n, p));
    for (std::size_t l = 0; l < widths.size(); ++l) EXPECT_GE(p.active_width(l), 1u);
  }
}

TEST(Prune, LargerTargetNeverRestoresUnits) {
  const ScoreNetwork n = random_net(14, small_arch(Activation::silu, {20, 20, 20}, 4));
  const auto s = importance_scores(PruneMethod::magnitude, n, nullptr, 0);
  std::vector<std::vector<std::uint8_t>> prev;
  for (double r = 0.05; r < 0.8; r += 0.05) {
    const ScoreNetwork p = prune_to_ratio(n, s, r);
    for (std::size_t l = 0; l < prev.size(); ++l)
      for (std::size_t u = 0; u < prev[l].size(); ++u) {
        if (!prev[l][u]) {
          EXPECT_EQ(p.masks[l][u], 0) << r;
        }
      }
    prev = p.masks;
  }
}

TEST(Prune, SelectionInvariantToScoreScale) {
  const ScoreNetwork n = random_net(15);
  auto s = importance_scores(PruneMethod::random, n, nullptr, 3);
  const ScoreNetwork a = prune_to_ratio(n, s, 0.4);
  for (auto& u : s) u.score *= 37.5;
  EXPECT_EQ(prune_to_ratio(n, s, 0.4).masks, a.masks);
}

TEST(Prune, KeepsOneUnitPerLayerAndRejectsUnreachableTargets) {
  const ScoreNetwork n = random_net(16, small_arch(Activation::silu, {8, 8}, 2));
  const auto s = importance_scores(PruneMethod::magnitude, n, nullptr, 0);
  EXPECT_THROW(prune_to_ratio(n, s, 0.99), Error);
  EXPECT_THROW(prune_to_ratio(n, s, 0.0), Error);
  EXPECT_THROW(prune_to_ratio(n, s, 1.0), Error);
  const ScoreNetwork p = prune_to_ratio(n, s, 0.905);  // (1, 1) is the floor, ratio 133/146
  EXPECT_EQ(p.active_width(0), 1u);
  EXPECT_EQ(p.active_width(1), 1u);
}

TEST(Prune, MethodNamesRoundTrip) {
  for (PruneMethod m : {PruneMethod::random, PruneMethod::magnitude, PruneMethod::lamp, PruneMethod::taylor})
    EXPECT_EQ(parse_prune_method(to_string(m)), m);
  EXPECT_THROW(parse_prune_method("diff"), Error);
}
