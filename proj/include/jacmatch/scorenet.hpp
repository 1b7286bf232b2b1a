#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "jacmatch/autodiff.hpp"
#include "jacmatch/rng.hpp"

namespace jacmatch {

enum class Activation { tanh, silu };

inline std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "silu"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "silu") return Activation::silu;
  throw Error("unknown activation '" + s + "'");
}

template <class X>
X activate(Activation a, const X& z) {
  return a == Activation::tanh ? tanh(z) : silu(z);
}

/// MLP eps-predictor: every hidden layer sees [h, emb(t)]; the output layer sees h.
struct Architecture {
  std::size_t input_dim = 2;
  std::vector<std::size_t> hidden_widths{128, 128, 128};
  std::size_t time_embed_dim = 32;
  Activation activation = Activation::silu;

  bool operator==(const Architecture&) const = default;
};

struct LayerShape {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t weight_offset = 0;  // (in x out) row-major
  std::size_t bias_offset = 0;    // (out)
};

/// Hidden layers followed by the output layer, with offsets into the flat parameter vector.
inline std::vector<LayerShape> layer_shapes(const Architecture& arch) {
  std::vector<LayerShape> shapes;
  std::size_t offset = 0;
  std::size_t prev = arch.input_dim;
  auto push = [&](std::size_t in, std::size_t out) {
    shapes.push_back({in, out, offset, offset + in * out});
    offset += in * out + out;
  };
  for (std::size_t w : arch.hidden_widths) {
    push(prev + arch.time_embed_dim, w);
    prev = w;
  }
  push(prev, arch.input_dim);
  return shapes;
}

inline std::size_t param_count(const Architecture& arch) {
  const auto shapes = layer_shapes(arch);
  return shapes.back().bias_offset + shapes.back().out;
}

/// Sinusoidal embedding of integer timesteps over a geometric frequency ladder.
struct TimeEmbedding {
  std::size_t dim = 0;
  std::vector<double> frequencies;

  explicit TimeEmbedding(std::size_t d) : dim(d) {
    if (d % 2 != 0) throw Error("time embedding dimension must be even");
    const std::size_t half = d / 2;
    for (std::size_t i = 0; i < half; ++i) {
      frequencies.push_back(std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half)));
    }
  }

  Tensor operator()(const std::vector<int>& t) const {
    const std::size_t half = frequencies.size();
    Tensor phase(Shape{t.size(), half});
    for (std::size_t b = 0; b < t.size(); ++b)
      for (std::size_t i = 0; i < half; ++i) phase(b, i) = t[b] * frequencies[i];
    return concat_cols(sin(phase), cos(phase));
  }
};

struct ScoreNetwork {
  Architecture arch;
  Tensor params;
  /// One 0/1 vector per hidden layer; empty when the network is unmasked.
  std::vector<std::vector<std::uint8_t>> masks;

  bool has_masks() const { return !masks.empty(); }

  void validate() const {
    if (arch.input_dim == 0) throw Error("input_dim must be positive");
    if (arch.time_embed_dim % 2 != 0) throw Error("time_embed_dim must be even");
    if (params.size() != param_count(arch)) {
      throw Error("parameter vector has " + std::to_string(params.size()) + " entries, architecture needs " +
                  std::to_string(param_count(arch)));
    }
    if (has_masks()) {
      if (masks.size() != arch.hidden_widths.size()) throw Error("one mask per hidden layer required");
      for (std::size_t l = 0; l < masks.size(); ++l) {
        if (masks[l].size() != arch.hidden_widths[l]) throw Error("mask length must equal layer width");
      }
    }
  }

  bool unit_active(std::size_t layer, std::size_t unit) const { return !has_masks() || masks[layer][unit] != 0; }

  std::size_t active_width(std::size_t layer) const {
    if (!has_masks()) return arch.hidden_widths[layer];
    std::size_t n = 0;
    for (auto m : masks[layer]) n += m != 0;
    return n;
  }
};

/// PyTorch-style uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
inline ScoreNetwork init_network(const Architecture& arch, Rng& rng) {
  ScoreNetwork net{arch, Tensor(Shape{param_count(arch)}), {}};
  for (const LayerShape& l : layer_shapes(arch)) {
    const double bound = l.in ? 1.0 / std::sqrt(static_cast<double>(l.in)) : 0.0;
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::size_t i = 0; i < l.in * l.out + l.out; ++i) net.params[l.weight_offset + i] = bound ? u(rng) : 0.0;
  }
  return net;
}

/// 0/1 per parameter: entries touching a masked unit are inactive.
inline Tensor param_mask(const ScoreNetwork& net) {
  const auto shapes = layer_shapes(net.arch);
  Tensor mask(Shape{net.params.size()}, 1.0);
  if (!net.has_masks()) return mask;
  const std::size_t hidden = net.arch.hidden_widths.size();
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const LayerShape& s = shapes[l];
    const std::size_t prev_width = l == 0 ? net.arch.input_dim : net.arch.hidden_widths[l - 1];
    for (std::size_t r = 0; r < s.in; ++r) {
      const bool row_on = l == 0 || r >= prev_width || net.unit_active(l - 1, r);
      for (std::size_t c = 0; c < s.out; ++c) {
        const bool col_on = l == hidden || net.unit_active(l, c);
        mask[s.weight_offset + r * s.out + c] = (row_on && col_on) ? 1.0 : 0.0;
      }
    }
    for (std::size_t c = 0; c < s.out; ++c) mask[s.bias_offset + c] = (l == hidden || net.unit_active(l, c)) ? 1.0 : 0.0;
  }
  return mask;
}

inline Tensor effective_params(const ScoreNetwork& net) {
  return net.has_masks() ? net.params * param_mask(net) : net.params;
}

/// Parameters counted over active units only.
inline std::size_t param_count(const ScoreNetwork& net) {
  if (!net.has_masks()) return param_count(net.arch);
  return static_cast<std::size_t>(kernels::sum(param_mask(net)));
}

/// Multiply-accumulates per forward pass: sum over layers of active fan_in x fan_out.
inline std::size_t mac_count(const ScoreNetwork& net, std::size_t batch = 1) {
  const auto& a = net.arch;
  std::size_t macs = 0;
  std::size_t prev = a.input_dim;
  for (std::size_t l = 0; l < a.hidden_widths.size(); ++l) {
    const std::size_t w = net.active_width(l);
    macs += (prev + a.time_embed_dim) * w;
    prev = w;
  }
  macs += prev * a.input_dim;
  return macs * batch;
}

template <class P>
struct Layer {
  P weight;
  P bias;
};

/// A network with its parameters expressed in algebra P (Tensor or Var).
template <class P>
struct BoundNetwork {
  Architecture arch;
  std::vector<Layer<P>> layers;
  TimeEmbedding embed;

  /// Algebra of the output for input algebra X (e.g. Tensor in, Var params -> Var out).
  template <class X>
  using output_t = decltype(add_row(matmul(std::declval<const X&>(), std::declval<const P&>()), std::declval<const P&>()));

  template <class X>
  output_t<X> operator()(const X& x, const std::vector<int>& t) const {
    return run(x, t, nullptr);
  }

  /// Forward pass; if `hidden` is given, the post-activation output of each
  /// hidden layer is appended to it.
  template <class X>
  output_t<X> run(const X& x, const std::vector<int>& t, std::vector<output_t<X>>* hidden) const {
    using Out = output_t<X>;
    const Tensor& xv = value_of(x);
    if (xv.rank() != 2 || xv.cols() != arch.input_dim) {
      throw ShapeError("network input must be (batch x " + std::to_string(arch.input_dim) + "), got " +
                       shape_str(xv.shape()));
    }
    if (t.size() != xv.rows()) throw ShapeError("network needs one timestep per row");
    const Tensor emb = embed(t);
    auto affine = [&](const auto& in, std::size_t l) -> Out {
      return add_row(matmul(in, layers[l].weight), layers[l].bias);
    };
    auto hidden_layer = [&](const auto& h, std::size_t l) -> Out {
      Out z = arch.time_embed_dim ? affine(concat_cols(h, emb), l) : affine(h, l);
      Out a = activate(arch.activation, z);
      if (hidden) hidden->push_back(a);
      return a;
    };
    const std::size_t n_hidden = layers.size() - 1;
    if (n_hidden == 0) return affine(x, 0);
    Out h = hidden_layer(x, 0);
    for (std::size_t l = 1; l < n_hidden; ++l) h = hidden_layer(h, l);
    return affine(h, n_hidden);
  }
};

template <class P>
BoundNetwork<P> bind_params(const Architecture& arch, const P& flat) {
  BoundNetwork<P> b{arch, {}, TimeEmbedding(arch.time_embed_dim)};
  for (const LayerShape& s : layer_shapes(arch)) {
    b.layers.push_back({slice(flat, s.weight_offset, {s.in, s.out}), slice(flat, s.bias_offset, {s.out})});
  }
  return b;
}

inline BoundNetwork<Tensor> bind(const ScoreNetwork& net) { return bind_params(net.arch, effective_params(net)); }

/// Binds taped parameters; masked entries are multiplied by zero so they receive no gradient.
inline BoundNetwork<Var> bind(const ScoreNetwork& net, const Var& params) {
  if (params.value().size() != param_count(net.arch)) throw ShapeError("parameter vector does not fit architecture");
  if (!net.has_masks()) return bind_params(net.arch, params);
  return bind_params(net.arch, params * param_mask(net));
}

/// Evaluates eps-hat for a single point (rank 1) or a batch (rank 2) at one timestep.
inline Tensor forward(const ScoreNetwork& net, const Tensor& x, int t) {
  const Tensor xb = as_batch(x);
  Tensor out = bind(net)(xb, std::vector<int>(xb.rows(), t));
  require_finite(out, "score network output");
  return out.reshaped(x.shape());
}

/// Physically removes masked units; the result computes the same function.
inline ScoreNetwork materialize_pruned(const ScoreNetwork& net) {
  if (!net.has_masks()) return net;
  net.validate();
  const auto& a = net.arch;
  Architecture small = a;
  for (std::size_t l = 0; l < a.hidden_widths.size(); ++l) small.hidden_widths[l] = net.active_width(l);

  const Tensor eff = effective_params(net);
  const auto src = layer_shapes(a);
  const auto dst = layer_shapes(small);
  ScoreNetwork out{small, Tensor(Shape{param_count(small)}), {}};

  auto active_list = [&](std::size_t layer) {
    std::vector<std::size_t> idx;
    for (std::size_t u = 0; u < a.hidden_widths[layer]; ++u)
      if (net.unit_active(layer, u)) idx.push_back(u);
    return idx;
  };

  const std::size_t hidden = a.hidden_widths.size();
  for (std::size_t l = 0; l <= hidden; ++l) {
    std::vector<std::size_t> rows;
    if (l == 0) {
      for (std::size_t r = 0; r < a.input_dim; ++r) rows.push_back(r);
    } else {
      rows = active_list(l - 1);
    }
    if (l < hidden) {
      const std::size_t prev = l == 0 ? a.input_dim : a.hidden_widths[l - 1];
      for (std::size_t e = 0; e < a.time_embed_dim; ++e) rows.push_back(prev + e);
    }
    std::vector<std::size_t> cols;
    if (l < hidden) {
      cols = active_list(l);
    } else {
      for (std::size_t c = 0; c < a.input_dim; ++c) cols.push_back(c);
    }
    const LayerShape& s = src[l];
    const LayerShape& d = dst[l];
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < cols.size(); ++j)
        out.params[d.weight_offset + i * d.out + j] = eff[s.weight_offset + rows[i] * s.out + cols[j]];
    for (std::size_t j = 0; j < cols.size(); ++j) out.params[d.bias_offset + j] = eff[s.bias_offset + cols[j]];
  }
  return out;
}

}  // namespace jacmatch
