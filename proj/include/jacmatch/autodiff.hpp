#pragma once

// Differentiation engine over three interchangeable value algebras:
//
//   Tensor   plain evaluation, no derivative information
//   Var      reverse mode: every op is recorded on a Tape and can be back-propagated
//   Dual<T>  forward mode: carries (primal, tangent); with T = Var the tangent itself
//            is taped, which gives reverse-over-forward (gradients of JVPs)
//
// Code written against the free functions below (matmul, add_row, tanh, silu, ...)
// runs unchanged in all three algebras. The primitive set is deliberately closed:
// affine maps, tanh/sigmoid/SiLU, sin/cos, square, sqrt, elementwise + - * /,
// sum, mean, row_sum, column slicing and concatenation.

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <type_traits>
#include <utility>

#include "jacmatch/tensor.hpp"

namespace jacmatch {

class Tape;

/// Handle to a node on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Records a computation for reverse-mode differentiation. A tape is owned by a
/// single computation and is not shared between threads.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self, const Tensor& grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, false, {}});
    return Var{this, nodes_.size() - 1};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var record(Tensor value, std::initializer_list<Var> inputs, Backward fn) {
    bool needs = false;
    for (const Var& v : inputs) {
      check_owner(v);
      needs = needs || nodes_[v.id].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), Tensor(), needs, false, needs ? std::move(fn) : Backward{}});
    return Var{this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  void accumulate(std::size_t id, Tensor g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = std::move(g);
      n.has_grad = true;
    } else {
      kernels::add_into(n.grad, g);
    }
  }

  /// Adds `g` into the flat range [offset, offset + g.size()) of node `id`'s gradient.
  void accumulate_range(std::size_t id, std::size_t offset, const Tensor& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape());
      n.has_grad = true;
    }
    kernels::axpy(1.0, g.data(), n.grad.data() + offset, g.size());
  }

  Tensor grad(const Var& v) const {
    check_owner(v);
    const Node& n = nodes_[v.id];
    return n.has_grad ? n.grad : Tensor(n.value.shape());
  }

  void backward(const Var& output, const Tensor& seed) {
    check_owner(output);
    require_same_shape(nodes_[output.id].value, seed, "backward seed");
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor();
    }
    accumulate(output.id, seed);
    for (std::size_t i = output.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, i, n.grad);
    }
  }

  void backward(const Var& scalar_output) {
    const Tensor& v = value(scalar_output.id);
    if (v.size() != 1) throw ShapeError("backward() without seed needs a scalar, got " + shape_str(v.shape()));
    backward(scalar_output, Tensor(v.shape(), 1.0));
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad;
    bool has_grad;
    Backward backward;
  };

  void check_owner(const Var& v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw Error("variable does not belong to this tape");
  }

  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

/// Forward-mode value: primal and tangent of identical shape.
template <class T>
struct Dual {
  T primal;
  T tangent;
};

/// Forward-mode carrier for plain tensors.
using DualBatch = Dual<Tensor>;

template <class T>
struct is_dual : std::false_type {};
template <class T>
struct is_dual<Dual<T>> : std::true_type {};

inline const Tensor& value_of(const Tensor& t) { return t; }
inline const Tensor& value_of(const Var& v) { return v.value(); }
template <class T>
const Tensor& value_of(const Dual<T>& d) {
  return value_of(d.primal);
}

// ---------------------------------------------------------------------------
// Tensor algebra

inline Tensor operator+(const Tensor& a, const Tensor& b) { return kernels::zip(a, b, std::plus<>{}, "add"); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return kernels::zip(a, b, std::minus<>{}, "sub"); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return kernels::zip(a, b, std::multiplies<>{}, "mul"); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return kernels::zip(a, b, std::divides<>{}, "div"); }
inline Tensor scale_shift(const Tensor& a, double scale, double shift) {
  return kernels::map(a, [=](double v) { return scale * v + shift; });
}
inline Tensor operator*(double s, const Tensor& a) { return scale_shift(a, s, 0.0); }
inline Tensor operator*(const Tensor& a, double s) { return scale_shift(a, s, 0.0); }
inline Tensor operator+(const Tensor& a, double s) { return scale_shift(a, 1.0, s); }
inline Tensor operator-(double s, const Tensor& a) { return scale_shift(a, -1.0, s); }
inline Tensor operator-(const Tensor& a) { return scale_shift(a, -1.0, 0.0); }

inline double sigmoid_scalar(double v) {
  const double e = kernels::exp(-std::abs(v));
  const double r = 1.0 / (1.0 + e);
  return v >= 0.0 ? r : e * r;
}

inline Tensor tanh(const Tensor& a) { return kernels::map(a, [](double v) { return std::tanh(v); }); }
inline Tensor sigmoid(const Tensor& a) { return kernels::map(a, sigmoid_scalar); }
inline Tensor silu(const Tensor& a) { return kernels::map(a, [](double v) { return v * sigmoid_scalar(v); }); }
inline Tensor sin(const Tensor& a) { return kernels::map(a, [](double v) { return std::sin(v); }); }
inline Tensor cos(const Tensor& a) { return kernels::map(a, [](double v) { return std::cos(v); }); }
inline Tensor square(const Tensor& a) { return kernels::map(a, [](double v) { return v * v; }); }
inline Tensor sqrt(const Tensor& a) { return kernels::map(a, [](double v) { return std::sqrt(v); }); }
inline Tensor sum(const Tensor& a) { return Tensor::scalar(kernels::sum(a)); }
inline Tensor mean(const Tensor& a) { return Tensor::scalar(kernels::sum(a) / static_cast<double>(a.size())); }
inline Tensor row_sum(const Tensor& a) { return kernels::row_sum(a); }
inline Tensor matmul(const Tensor& a, const Tensor& w) { return kernels::matmul(a, w); }
inline Tensor add_row(const Tensor& a, const Tensor& b) { return kernels::add_row(a, b); }
inline Tensor concat_cols(const Tensor& a, const Tensor& b) { return kernels::concat_cols(a, b); }
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  if (a.rank() != 2 || begin + count > a.cols()) throw ShapeError("slice_cols out of range");
  return kernels::slice_cols(a, begin, count);
}
/// Contiguous flat range of `a` reshaped to `shape`.
inline Tensor slice(const Tensor& a, std::size_t offset, Shape shape) {
  const std::size_t n = shape_size(shape);
  if (offset + n > a.size()) throw ShapeError("slice out of range");
  return Tensor(std::move(shape), std::vector<double>(a.data() + offset, a.data() + offset + n));
}

// ---------------------------------------------------------------------------
// Var algebra

namespace detail {

inline Tape& tape_of(const Var& a, const Var& b) {
  if (a.tape != b.tape) throw Error("variables recorded on different tapes");
  return *a.tape;
}

template <class Fwd, class Bwd>
Var unary(const Var& a, Fwd fwd, Bwd bwd) {
  Tensor y = kernels::map(a.value(), fwd);
  return a.tape->record(std::move(y), {a}, [ia = a.id, bwd](Tape& t, std::size_t self, const Tensor& g) {
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(self);
    Tensor gx = g;
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] *= bwd(x[i], y[i]);
    t.accumulate(ia, std::move(gx));
  });
}

}  // namespace detail

inline Var operator+(const Var& a, const Var& b) {
  Tape& tape = detail::tape_of(a, b);
  return tape.record(a.value() + b.value(), {a, b}, [ia = a.id, ib = b.id](Tape& t, std::size_t, const Tensor& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

inline Var operator-(const Var& a, const Var& b) {
  Tape& tape = detail::tape_of(a, b);
  return tape.record(a.value() - b.value(), {a, b}, [ia = a.id, ib = b.id](Tape& t, std::size_t, const Tensor& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) t.accumulate(ib, -g);
  });
}

inline Var operator*(const Var& a, const Var& b) {
  Tape& tape = detail::tape_of(a, b);
  return tape.record(a.value() * b.value(), {a, b}, [ia = a.id, ib = b.id](Tape& t, std::size_t, const Tensor& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.requires_grad(ib)) t.accumulate(ib, g * t.value(ia));
  });
}

inline Var operator/(const Var& a, const Var& b) {
  Tape& tape = detail::tape_of(a, b);
  return tape.record(a.value() / b.value(), {a, b}, [ia = a.id, ib = b.id](Tape& t, std::size_t self, const Tensor& g) {
    const Tensor& bv = t.value(ib);
    if (t.requires_grad(ia)) t.accumulate(ia, g / bv);
    if (t.requires_grad(ib)) t.accumulate(ib, -(g * t.value(self) / bv));
  });
}

inline Var scale_shift(const Var& a, double scale, double shift) {
  return a.tape->record(scale_shift(a.value(), scale, shift), {a},
                        [ia = a.id, scale](Tape& t, std::size_t, const Tensor& g) { t.accumulate(ia, scale * g); });
}

inline Var lift(const Var& like, const Tensor& c) { return like.tape->constant(c); }

inline Var operator+(const Var& a, const Tensor& c) { return a + lift(a, c); }
inline Var operator+(const Tensor& c, const Var& a) { return lift(a, c) + a; }
inline Var operator-(const Var& a, const Tensor& c) { return a - lift(a, c); }
inline Var operator-(const Tensor& c, const Var& a) { return lift(a, c) - a; }
inline Var operator*(const Var& a, const Tensor& c) { return a * lift(a, c); }
inline Var operator*(const Tensor& c, const Var& a) { return lift(a, c) * a; }
inline Var operator/(const Var& a, const Tensor& c) { return a / lift(a, c); }
inline Var operator*(double s, const Var& a) { return scale_shift(a, s, 0.0); }
inline Var operator*(const Var& a, double s) { return scale_shift(a, s, 0.0); }
inline Var operator+(const Var& a, double s) { return scale_shift(a, 1.0, s); }
inline Var operator-(double s, const Var& a) { return scale_shift(a, -1.0, s); }
inline Var operator-(const Var& a) { return scale_shift(a, -1.0, 0.0); }

inline Var tanh(const Var& a) {
  return detail::unary(a, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}
inline Var sigmoid(const Var& a) {
  return detail::unary(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}
inline Var silu(const Var& a) {
  // keep the sigmoid from the forward pass; backward then needs no exp
  Tensor sg = sigmoid(a.value());
  Tensor y = a.value() * sg;
  return a.tape->record(std::move(y), {a}, [ia = a.id, sg = std::move(sg)](Tape& t, std::size_t, const Tensor& g) {
    const Tensor& x = t.value(ia);
    Tensor gx = g;
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] *= sg[i] * (1.0 + x[i] * (1.0 - sg[i]));
    t.accumulate(ia, std::move(gx));
  });
}
inline Var sin(const Var& a) {
  return detail::unary(a, [](double v) { return std::sin(v); }, [](double x, double) { return std::cos(x); });
}
inline Var cos(const Var& a) {
  return detail::unary(a, [](double v) { return std::cos(v); }, [](double x, double) { return -std::sin(x); });
}
inline Var square(const Var& a) {
  return detail::unary(a, [](double v) { return v * v; }, [](double x, double) { return 2.0 * x; });
}
inline Var sqrt(const Var& a) {
  return detail::unary(a, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

inline Var sum(const Var& a) {
  return a.tape->record(sum(a.value()), {a}, [ia = a.id](Tape& t, std::size_t, const Tensor& g) {
    t.accumulate(ia, Tensor(t.value(ia).shape(), g.item()));
  });
}

inline Var mean(const Var& a) {
  return a.tape->record(mean(a.value()), {a}, [ia = a.id](Tape& t, std::size_t, const Tensor& g) {
    const Tensor& x = t.value(ia);
    t.accumulate(ia, Tensor(x.shape(), g.item() / static_cast<double>(x.size())));
  });
}

inline Var row_sum(const Var& a) {
  return a.tape->record(row_sum(a.value()), {a}, [ia = a.id](Tape& t, std::size_t, const Tensor& g) {
    const Tensor& x = t.value(ia);
    Tensor gx(x.shape());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (double& v : gx.row(i)) v = g[i];
    t.accumulate(ia, std::move(gx));
  });
}

inline Var matmul(const Var& a, const Var& w) {
  Tape& tape = detail::tape_of(a, w);
  return tape.record(matmul(a.value(), w.value()), {a, w}, [ia = a.id, iw = w.id](Tape& t, std::size_t, const Tensor& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, kernels::matmul_nt(g, t.value(iw)));
    if (t.requires_grad(iw)) t.accumulate(iw, kernels::matmul_tn(t.value(ia), g));
  });
}
inline Var matmul(const Var& a, const Tensor& w) { return matmul(a, lift(a, w)); }
inline Var matmul(const Tensor& a, const Var& w) { return matmul(lift(w, a), w); }

inline Var add_row(const Var& a, const Var& b) {
  Tape& tape = detail::tape_of(a, b);
  return tape.record(add_row(a.value(), b.value()), {a, b}, [ia = a.id, ib = b.id](Tape& t, std::size_t, const Tensor& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) t.accumulate(ib, kernels::column_sums(g).reshaped(t.value(ib).shape()));
  });
}
inline Var add_row(const Var& a, const Tensor& b) { return add_row(a, lift(a, b)); }
inline Var add_row(const Tensor& a, const Var& b) { return add_row(lift(b, a), b); }

inline Var concat_cols(const Var& a, const Var& b) {
  Tape& tape = detail::tape_of(a, b);
  return tape.record(concat_cols(a.value(), b.value()), {a, b}, [ia = a.id, ib = b.id](Tape& t, std::size_t, const Tensor& g) {
    const std::size_t ca = t.value(ia).cols(), cb = t.value(ib).cols();
    if (t.requires_grad(ia)) t.accumulate(ia, kernels::slice_cols(g, 0, ca));
    if (t.requires_grad(ib)) t.accumulate(ib, kernels::slice_cols(g, ca, cb));
  });
}
inline Var concat_cols(const Var& a, const Tensor& b) { return concat_cols(a, lift(a, b)); }

inline Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
  return a.tape->record(slice_cols(a.value(), begin, count), {a}, [ia = a.id, begin](Tape& t, std::size_t, const Tensor& g) {
    const Tensor& x = t.value(ia);
    Tensor gx(x.shape());
    for (std::size_t i = 0; i < x.rows(); ++i) std::copy(g.row(i).begin(), g.row(i).end(), gx.row(i).begin() + begin);
    t.accumulate(ia, std::move(gx));
  });
}

inline Var slice(const Var& a, std::size_t offset, Shape shape) {
  return a.tape->record(slice(a.value(), offset, std::move(shape)), {a},
                        [ia = a.id, offset](Tape& t, std::size_t, const Tensor& g) { t.accumulate_range(ia, offset, g); });
}

// ---------------------------------------------------------------------------
// Dual algebra

namespace detail {

/// Brings `x` into the algebra of `like` (a Tensor tangent next to a Var primal).
template <class R, class T>
R promote(const T& x, const R& like) {
  if constexpr (std::is_same_v<T, R>) {
    (void)like;
    return x;
  } else {
    static_assert(std::is_same_v<T, Tensor> && std::is_same_v<R, Var>);
    return lift(like, x);
  }
}

template <class P, class T>
auto make_dual(P p, const T& t) {
  auto tangent = promote(t, p);
  return Dual<P>{std::move(p), std::move(tangent)};
}

}  // namespace detail

template <class T>
Dual<T> operator+(const Dual<T>& a, const Dual<T>& b) {
  return {a.primal + b.primal, a.tangent + b.tangent};
}
template <class T>
Dual<T> operator-(const Dual<T>& a, const Dual<T>& b) {
  return {a.primal - b.primal, a.tangent - b.tangent};
}
template <class T>
Dual<T> operator*(const Dual<T>& a, const Dual<T>& b) {
  return {a.primal * b.primal, a.tangent * b.primal + a.primal * b.tangent};
}
template <class T>
Dual<T> operator/(const Dual<T>& a, const Dual<T>& b) {
  T y = a.primal / b.primal;
  return {y, (a.tangent - y * b.tangent) / b.primal};
}
template <class T>
Dual<T> operator+(const Dual<T>& a, const Tensor& c) {
  return {a.primal + c, a.tangent};
}
template <class T>
Dual<T> operator-(const Dual<T>& a, const Tensor& c) {
  return {a.primal - c, a.tangent};
}
template <class T>
Dual<T> operator*(const Dual<T>& a, const Tensor& c) {
  return {a.primal * c, a.tangent * c};
}
template <class T>
Dual<T> operator*(double s, const Dual<T>& a) {
  return {s * a.primal, s * a.tangent};
}
template <class T>
Dual<T> operator*(const Dual<T>& a, double s) {
  return s * a;
}
template <class T>
Dual<T> operator+(const Dual<T>& a, double s) {
  return {a.primal + s, a.tangent};
}
template <class T>
Dual<T> operator-(double s, const Dual<T>& a) {
  return {s - a.primal, -a.tangent};
}
template <class T>
Dual<T> operator-(const Dual<T>& a) {
  return {-a.primal, -a.tangent};
}

template <class T>
Dual<T> tanh(const Dual<T>& a) {
  T y = tanh(a.primal);
  return {y, (1.0 - square(y)) * a.tangent};
}
template <class T>
Dual<T> sigmoid(const Dual<T>& a) {
  T s = sigmoid(a.primal);
  return {s, (s * (1.0 - s)) * a.tangent};
}
template <class T>
Dual<T> silu(const Dual<T>& a) {
  T s = sigmoid(a.primal);
  T y = a.primal * s;
  // d/dx x*s(x) = s + x*s*(1-s) = s + y*(1-s)
  return {y, (s + y * (1.0 - s)) * a.tangent};
}
template <class T>
Dual<T> sin(const Dual<T>& a) {
  return {sin(a.primal), cos(a.primal) * a.tangent};
}
template <class T>
Dual<T> cos(const Dual<T>& a) {
  return {cos(a.primal), -(sin(a.primal) * a.tangent)};
}
template <class T>
Dual<T> square(const Dual<T>& a) {
  return {square(a.primal), 2.0 * (a.primal * a.tangent)};
}
template <class T>
Dual<T> sqrt(const Dual<T>& a) {
  T y = sqrt(a.primal);
  return {y, 0.5 * (a.tangent / y)};
}
template <class T>
Dual<T> sum(const Dual<T>& a) {
  return {sum(a.primal), sum(a.tangent)};
}
template <class T>
Dual<T> mean(const Dual<T>& a) {
  return {mean(a.primal), mean(a.tangent)};
}
template <class T>
Dual<T> row_sum(const Dual<T>& a) {
  return {row_sum(a.primal), row_sum(a.tangent)};
}
template <class T, class W>
auto matmul(const Dual<T>& a, const W& w) {
  auto p = matmul(a.primal, w);
  return detail::make_dual(std::move(p), matmul(a.tangent, w));
}
template <class T, class B>
auto add_row(const Dual<T>& a, const B& b) {
  auto p = add_row(a.primal, b);
  return detail::make_dual(std::move(p), a.tangent);
}
template <class T>
Dual<T> concat_cols(const Dual<T>& a, const Tensor& c) {
  return {concat_cols(a.primal, c), concat_cols(a.tangent, Tensor(c.shape()))};
}
template <class T>
Dual<T> concat_cols(const Dual<T>& a, const Dual<T>& b) {
  return {concat_cols(a.primal, b.primal), concat_cols(a.tangent, b.tangent)};
}
template <class T>
Dual<T> slice_cols(const Dual<T>& a, std::size_t begin, std::size_t count) {
  return {slice_cols(a.primal, begin, count), slice_cols(a.tangent, begin, count)};
}

// ---------------------------------------------------------------------------
// Differentiation entry points. `f` must be generic over the algebra
// (e.g. a lambda taking `const auto&`).

/// Forward-mode evaluation returning the raw Dual. If `f` closes over taped
/// parameters the result is a Dual<Var> that can itself be differentiated.
template <class F>
auto jvp_dual(F&& f, const Tensor& x, const Tensor& v) {
  require_same_shape(x, v, "jvp");
  return f(DualBatch{x, v});
}

/// Returns (f(x), J v) with J the Jacobian of f at x. No Jacobian is formed.
template <class F>
std::pair<Tensor, Tensor> jvp(F&& f, const Tensor& x, const Tensor& v) {
  DualBatch out = jvp_dual(f, x, v);
  require_finite(out.primal, "jvp primal");
  require_finite(out.tangent, "jvp tangent");
  return {std::move(out.primal), std::move(out.tangent)};
}

/// Returns J^T u.
template <class F>
Tensor vjp(F&& f, const Tensor& x, const Tensor& u) {
  Tape tape;
  Var xv = tape.leaf(x);
  Var y = f(xv);
  if (y.shape() != u.shape()) {
    throw ShapeError("vjp: cotangent " + shape_str(u.shape()) + " does not match output " + shape_str(y.shape()));
  }
  require_finite(y.value(), "vjp output");
  tape.backward(y, u);
  Tensor g = tape.grad(xv);
  require_finite(g, "vjp result");
  return g;
}

/// Gradient of a scalar-valued `loss` at `params`.
template <class F>
Tensor grad(F&& loss, const Tensor& params) {
  Tape tape;
  Var p = tape.leaf(params);
  Var l = loss(p);
  if (l.value().size() != 1) throw ShapeError("grad: loss is not scalar, shape " + shape_str(l.shape()));
  require_finite(l.value(), "grad loss");
  tape.backward(l);
  Tensor g = tape.grad(p);
  require_finite(g, "grad result");
  return g;
}

/// Central difference (f(x + h v) - f(x - h v)) / 2h.
template <class F>
Tensor finite_difference_jvp(F&& f, const Tensor& x, const Tensor& v, double h) {
  if (!(h > 0.0)) throw Error("finite_difference_jvp: step must be positive");
  require_same_shape(x, v, "finite_difference_jvp");
  Tensor fp = value_of(f(x + h * v));
  Tensor fm = value_of(f(x - h * v));
  return (1.0 / (2.0 * h)) * (fp - fm);
}

}  // namespace jacmatch
