#include <fstream>

#include "helpers.hpp"

using namespace jmtest;

namespace {

// tests/oracles/scorenet.py: arch 2 -> [3, 2] -> 2, embed 4, params 0.5 sin(1 + i), x = (0.5, -1.2), t = 7
constexpr double kTanhOut[2] = {-0.656455414088896, -0.4605819547676464};
constexpr double kSiluOut[2] = {-0.5564308967630278, -0.4694552191300049};
constexpr const char* kCheckpointHex =
    "4a4d434b0100000002000000010000000200000000000000006400000000fca9f1d24d62503f9a9999999999c93f0c00000000000000000000"
    "0000000000000000000000d03f000000000000e03f000000000000e83f000000000000f03f000000000000f43f000000000000f83f0000000000"
    "00fc3f0000000000000040000000000000024000000000000004400000000000000640010100";

ScoreNetwork tiny(std::size_t hidden = 4) {
  Architecture a;
  a.hidden_widths = {hidden};
  a.time_embed_dim = 0;
  a.activation = Activation::tanh;
  Rng rng = make_rng(1);
  return init_network(a, rng);
}

std::vector<std::vector<std::uint8_t>> random_masks(const Architecture& a, Rng& rng) {
  std::vector<std::vector<std::uint8_t>> m;
  std::bernoulli_distribution keep(0.6);
  for (std::size_t w : a.hidden_widths) {
    std::vector<std::uint8_t> layer(w);
    for (auto& b : layer) b = keep(rng);
    layer[std::uniform_int_distribution<std::size_t>(0, w - 1)(rng)] = 1;  // never empty
    m.push_back(layer);
  }
  return m;
}

std::string hex(const std::vector<std::uint8_t>& b) {
  std::string s;
  char buf[3];
  for (auto c : b) {
    std::snprintf(buf, sizeof buf, "%02x", c);
    s += buf;
  }
  return s;
}

}  // namespace

TEST(ScoreNet, ParamCountExamples) {
  ScoreNetwork n = tiny();
  EXPECT_EQ(param_count(n.arch), 22u);
  EXPECT_EQ(param_count(n), 22u);
  n.masks = {{1, 0, 1, 0}};
  EXPECT_EQ(param_count(n), 12u);
  EXPECT_EQ(param_count(materialize_pruned(n)), 12u);
}

TEST(ScoreNet, MacCountCountsActiveFanInTimesFanOut) {
  ScoreNetwork n = tiny();
  EXPECT_EQ(mac_count(n), 16u);
  EXPECT_EQ(mac_count(n, 10), 160u);
  n.masks = {{1, 0, 1, 0}};
  EXPECT_EQ(mac_count(n), 8u);
  const ScoreNetwork d{Architecture{}, Tensor(Shape{param_count(Architecture{})}), {}};
  EXPECT_EQ(mac_count(d), (2u + 32) * 128 + (128u + 32) * 128 * 2 + 128u * 2);
}

TEST(ScoreNet, ZeroParamsGiveZeroOutput) {
  ScoreNetwork n = random_net(2);
  n.params = Tensor(n.params.shape());
  EXPECT_EQ(forward(n, Tensor::matrix({{1, 2}, {-3, 4}}), 5), Tensor(Shape{2, 2}));
}

TEST(ScoreNet, FullyMaskedLayerLeavesOnlyOutputBias) {
  ScoreNetwork n = random_net(3, small_arch(Activation::silu, {8, 8}));
  n.masks = {std::vector<std::uint8_t>(8, 1), std::vector<std::uint8_t>(8, 0)};
  const LayerShape out = layer_shapes(n.arch).back();
  const Tensor y = forward(n, Tensor::matrix({{0.3, 0.1}, {2, -1}}), 9);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(y(i, j), n.params[out.bias_offset + j]);
  for (std::size_t j = 0; j < 2; ++j) n.params[out.bias_offset + j] = 0.0;
  EXPECT_EQ(forward(n, Tensor::matrix({{0.3, 0.1}}), 9), Tensor(Shape{1, 2}));
}

TEST(ScoreNet, ForwardMatchesIndependentImplementation) {
  for (Activation act : {Activation::tanh, Activation::silu}) {
    ScoreNetwork n{small_arch(act, {3, 2}, 4), {}, {}};
    n.params = Tensor(Shape{param_count(n.arch)});
    ASSERT_EQ(n.params.size(), 43u);
    for (std::size_t i = 0; i < n.params.size(); ++i) n.params[i] = 0.5 * std::sin(1.0 + static_cast<double>(i));
    const Tensor y = forward(n, Tensor::vector({0.5, -1.2}), 7);
    const double* expect = act == Activation::tanh ? kTanhOut : kSiluOut;
    EXPECT_NEAR(y[0], expect[0], 1e-14);
    EXPECT_NEAR(y[1], expect[1], 1e-14);
  }
}

TEST(ScoreNet, ForwardShapesAndErrors) {
  const ScoreNetwork n = random_net(4);
  EXPECT_EQ(forward(n, Tensor::vector({1, 2}), 0).shape(), (Shape{2}));
  EXPECT_EQ(forward(n, Tensor::matrix({{1, 2}, {3, 4}, {5, 6}}), 0).shape(), (Shape{3, 2}));
  EXPECT_THROW(forward(n, Tensor::matrix({{1, 2, 3}}), 0), ShapeError);
  ScoreNetwork bad = n;
  bad.params[layer_shapes(bad.arch).back().bias_offset] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(forward(bad, Tensor::vector({1, 2}), 0), NonFiniteError);
}

TEST(ScoreNet, JvpInInputMatchesFiniteDifferences) {
  const auto f = at_time(random_net(5, small_arch(Activation::silu, {32, 32, 32}, 8)), 40);
  Rng rng = make_rng(6);
  for (int i = 0; i < 10; ++i) {
    const Tensor x = randn(Shape{1, 2}, rng), v = randn(Shape{1, 2}, rng);
    EXPECT_LT(rel_err(jvp(f, x, v).second, finite_difference_jvp(f, x, v, 1e-5)), 1e-4);
  }
}

TEST(ScoreNet, ValidateRejectsInconsistentNetworks) {
  ScoreNetwork n = random_net(7);
  n.params = Tensor(Shape{3});
  EXPECT_THROW(n.validate(), Error);
  n = random_net(7);
  n.masks = {{1, 1}};
  EXPECT_THROW(n.validate(), Error);
  n.masks = {std::vector<std::uint8_t>(16, 1), std::vector<std::uint8_t>(15, 1)};
  EXPECT_THROW(n.validate(), Error);
  EXPECT_THROW(TimeEmbedding(3), Error);
}

TEST(TimeEmbedding, EqualStepsEqualDistinctStepsDistinct) {
  for (std::size_t d : {2u, 8u, 32u}) {
    const TimeEmbedding e(d);
    std::vector<int> t(100);
    for (int i = 0; i < 100; ++i) t[i] = i;
    const Tensor a = e(t), b = e(t);
    EXPECT_EQ(a, b);
    for (int i = 0; i < 100; ++i)
      for (int j = i + 1; j < 100; ++j) {
        double diff = 0;
        for (std::size_t k = 0; k < d; ++k) diff += std::abs(a(i, k) - a(j, k));
        EXPECT_GT(diff, 1e-6) << i << " " << j;
      }
  }
}

TEST(Materialize, AllOnesMaskIsUnchanged) {
  ScoreNetwork n = random_net(8);
  n.masks = {std::vector<std::uint8_t>(16, 1), std::vector<std::uint8_t>(16, 1)};
  const ScoreNetwork m = materialize_pruned(n);
  EXPECT_FALSE(m.has_masks());
  EXPECT_EQ(m.params, n.params);
  const Tensor x = Tensor::matrix({{0.1, 0.2}});
  EXPECT_EQ(forward(m, x, 3), forward(n, x, 3));
}

TEST(Materialize, OneMaskedUnitShrinksWidth) {
  ScoreNetwork n = tiny();
  n.masks = {{1, 1, 0, 1}};
  EXPECT_EQ(materialize_pruned(n).arch.hidden_widths, (std::vector<std::size_t>{3}));
}

TEST(Materialize, RandomMaskSweepAgreesWithMaskedForward) {
  const Architecture a = small_arch(Activation::silu, {12, 10, 8}, 6);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    ScoreNetwork n = random_net(100 + seed, a);
    Rng rng = make_rng(seed, {9});
    n.masks = random_masks(a, rng);
    const ScoreNetwork m = materialize_pruned(n);
    EXPECT_EQ(param_count(m), param_count(n));
    EXPECT_EQ(mac_count(m), mac_count(n));
    const Tensor x = 2.0 * randn(Shape{100, 2}, rng);
    std::vector<int> t(100);
    for (auto& ti : t) ti = std::uniform_int_distribution<int>(0, 99)(rng);
    EXPECT_LT(rel_err(bind(m)(x, t), bind(n)(x, t)), 1e-12) << "seed " << seed;
  }
}

TEST(ScoreNet, PermutingHiddenUnitsLeavesOutputUnchanged) {
  const ScoreNetwork n = random_net(10, small_arch(Activation::tanh, {6, 5}, 4));
  const auto shapes = layer_shapes(n.arch);
  // reverse the units of the first hidden layer: its columns and the matching rows of the next layer
  ScoreNetwork p = n;
  const LayerShape& l0 = shapes[0];
  const LayerShape& l1 = shapes[1];
  const std::size_t w = 6;
  for (std::size_t u = 0; u < w; ++u) {
    const std::size_t v = w - 1 - u;
    for (std::size_t r = 0; r < l0.in; ++r) p.params[l0.weight_offset + r * l0.out + u] = n.params[l0.weight_offset + r * l0.out + v];
    p.params[l0.bias_offset + u] = n.params[l0.bias_offset + v];
    for (std::size_t c = 0; c < l1.out; ++c) p.params[l1.weight_offset + u * l1.out + c] = n.params[l1.weight_offset + v * l1.out + c];
  }
  EXPECT_NE(p.params, n.params);
  Rng rng = make_rng(11);
  const Tensor x = randn(Shape{20, 2}, rng);
  EXPECT_LT(rel_err(forward(p, x, 13), forward(n, x, 13)), 1e-12);
}

TEST(ScoreNet, PruningRatioMatchesIndependentRecount) {
  const Architecture a = small_arch(Activation::silu, {12, 10, 8}, 6);
  Rng rng = make_rng(12);
  for (int rep = 0; rep < 20; ++rep) {
    ScoreNetwork n = random_net(200 + rep, a);
    n.masks = random_masks(a, rng);
    // recount from surviving widths alone
    std::size_t count = 0, prev = a.input_dim;
    for (std::size_t l = 0; l < a.hidden_widths.size(); ++l) {
      std::size_t w = 0;
      for (auto b : n.masks[l]) w += b;
      count += (prev + a.time_embed_dim) * w + w;
      prev = w;
    }
    count += prev * a.input_dim + a.input_dim;
    EXPECT_EQ(param_count(n), count);
    const double ratio = 1.0 - static_cast<double>(param_count(materialize_pruned(n))) / param_count(a);
    EXPECT_DOUBLE_EQ(ratio, 1.0 - static_cast<double>(count) / param_count(a));
  }
}

TEST(Checkpoint, MatchesIndependentByteLayout) {
  Checkpoint ck;
  ck.net = tiny(2);
  for (std::size_t i = 0; i < ck.net.params.size(); ++i) ck.net.params[i] = 0.25 * static_cast<double>(i);
  ck.net.masks = {{1, 0}};
  EXPECT_EQ(hex(encode_checkpoint(ck)), kCheckpointHex);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  Checkpoint ck{random_net(13, small_arch(Activation::silu, {7, 5}, 6)), ScheduleConfig{ScheduleKind::cosine, 50, 1e-4, 0.3}};
  Rng rng = make_rng(14);
  ck.net.masks = random_masks(ck.net.arch, rng);
  const auto bytes = encode_checkpoint(ck);
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  EXPECT_EQ(back.net.params, ck.net.params);
  EXPECT_EQ(back.net.masks, ck.net.masks);
  EXPECT_EQ(back.net.arch, ck.net.arch);
  EXPECT_EQ(back.schedule, ck.schedule);

  const auto dir = scratch_dir("ckpt");
  const std::string path = (dir / "a.ckpt").string();
  save_checkpoint(path, ck);
  EXPECT_EQ(read_file_bytes(path), bytes);
  save_checkpoint((dir / "b.ckpt").string(), load_checkpoint(path));
  EXPECT_EQ(read_file_bytes((dir / "b.ckpt").string()), bytes);
}

TEST(Checkpoint, RejectsCorruptInput) {
  const auto bytes = encode_checkpoint(Checkpoint{random_net(15), {}});
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), Error);
  EXPECT_THROW(decode_checkpoint(std::span(bytes).first(bytes.size() - 1)), Error);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(decode_checkpoint(bad), Error);
  bad = bytes;
  bad[4] = 9;  // version
  EXPECT_THROW(decode_checkpoint(bad), Error);
  EXPECT_THROW(load_checkpoint("/nonexistent/x.ckpt"), Error);
}
