#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace jacmatch {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

/// Dense row-major array of doubles. Rank 0 is a scalar, rank 2 a (rows x cols)
/// batch; most kernels below operate on rank-2 tensors.
class Tensor {
 public:
  Tensor() : shape_{0} {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor(Shape{values.size()}, std::vector<double>(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const {
    require_rank2("rows");
    return shape_[0];
  }
  std::size_t cols() const {
    require_rank2("cols");
    return shape_[1];
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * shape_[1], shape_[1]}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * shape_[1], shape_[1]}; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool operator==(const Tensor& other) const = default;

 private:
  void require_rank2(const char* what) const {
    if (shape_.size() != 2) throw ShapeError(std::string(what) + "() needs rank 2, got " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NonFiniteError(std::string(what) + ": non-finite value");
}

/// Promotes a rank-1 vector to a (1 x n) batch; rank-2 passes through.
inline Tensor as_batch(const Tensor& t) {
  if (t.rank() == 2) return t;
  if (t.rank() == 1) return t.reshaped({1, t.size()});
  throw ShapeError("expected a vector or a batch, got " + shape_str(t.shape()));
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

namespace kernels {

/// exp(x) to about 1 ulp. Written without calls or table lookups so loops over it vectorize;
/// the result depends only on x, never on the position in a batch. Saturates outside
/// [-708, 709]; NaN propagates.
inline double exp(double x) {
  double xc = x < -708.0 ? -708.0 : x;
  xc = xc > 709.0 ? 709.0 : xc;
  constexpr double shifter = 6755399441055744.0;  // 1.5 * 2^52
  const double shifted = xc * 1.4426950408889634 + shifter;
  const double kd = shifted - shifter;
  const double r = (xc - kd * 0.6931471803691238) - kd * 1.9082149292705877e-10;
  double p = 1.0 / 6227020800.0;
  p = p * r + 1.0 / 479001600.0;
  p = p * r + 1.0 / 39916800.0;
  p = p * r + 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;
  // the low mantissa bits of `shifted` hold k = kd as a two's complement integer
  // memcpy rather than bit_cast: gcc 11 will not vectorize the latter
  std::uint64_t k;
  std::memcpy(&k, &shifted, sizeof k);
  k = (k + 1023u) << 52;
  double scale;
  std::memcpy(&scale, &k, sizeof k);
  return p * scale;
}


template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  const double* x = a.data();
  double* y = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = f(x[i]);
  return out;
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, F f, const char* op) {
  require_same_shape(a, b, op);
  Tensor out(a.shape());
  const double* x = a.data();
  const double* z = b.data();
  double* y = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = f(x[i], z[i]);
  return out;
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) y[j] += alpha * x[j];
}

namespace detail {

// Register tile of R output rows by C output columns. Every output element is
// accumulated as acc = acc + a[i,k] * w[k,j] for k ascending from zero, the
// same sequence used by the edge loops below.
template <std::size_t R, std::size_t C>
inline void gemm_tile(const double* a, std::size_t lda, const double* w, std::size_t ldw, double* out,
                      std::size_t ldo, std::size_t n) {
  double acc[R][C] = {};
  for (std::size_t k = 0; k < n; ++k) {
    const double* wk = w + k * ldw;
    for (std::size_t r = 0; r < R; ++r) {
      const double ar = a[r * lda + k];
      for (std::size_t c = 0; c < C; ++c) acc[r][c] += ar * wk[c];
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * ldo + c] = acc[r][c];
}

inline void gemm_edge(const double* a, std::size_t lda, const double* w, std::size_t ldw, double* out,
                      std::size_t ldo, std::size_t rows, std::size_t cols, std::size_t n) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = out + r * ldo;
    for (std::size_t c = 0; c < cols; ++c) o[c] = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double ar = a[r * lda + k];
      const double* wk = w + k * ldw;
      for (std::size_t c = 0; c < cols; ++c) o[c] += ar * wk[c];
    }
  }
}

}  // namespace detail

// out(rows x m) = a(rows x n) * w(n x m). Each output row depends only on its
// own input row and accumulates in a fixed order, so results do not depend on
// how many rows are batched together.
inline void gemm_rows(const double* a, const double* w, double* out, std::size_t rows, std::size_t n,
                      std::size_t m) {
  constexpr std::size_t R = 4, C = 32;
  const std::size_t full_rows = rows - rows % R;
  const std::size_t full_cols = m - m % C;
  for (std::size_t i = 0; i < full_rows; i += R) {
    for (std::size_t j = 0; j < full_cols; j += C) detail::gemm_tile<R, C>(a + i * n, n, w + j, m, out + i * m + j, m, n);
    if (full_cols < m) detail::gemm_edge(a + i * n, n, w + full_cols, m, out + i * m + full_cols, m, R, m - full_cols, n);
  }
  if (full_rows < rows) detail::gemm_edge(a + full_rows * n, n, w, m, out + full_rows * m, m, rows - full_rows, m, n);
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = a(i, j);
  return out;
}

/// a(B x n) * w(n x m)
inline Tensor matmul(const Tensor& a, const Tensor& w) {
  if (a.rank() != 2 || w.rank() != 2 || a.cols() != w.rows()) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(w.shape()));
  }
  Tensor out(Shape{a.rows(), w.cols()});
  gemm_rows(a.data(), w.data(), out.data(), a.rows(), a.cols(), w.cols());
  return out;
}

/// g(B x m) * w(n x m)^T
inline Tensor matmul_nt(const Tensor& g, const Tensor& w) { return matmul(g, transpose(w)); }

/// a(B x n)^T * g(B x m)
inline Tensor matmul_tn(const Tensor& a, const Tensor& g) {
  if (a.rank() != 2 || g.rank() != 2 || a.rows() != g.rows()) {
    throw ShapeError("matmul_tn: incompatible shapes " + shape_str(a.shape()) + " , " + shape_str(g.shape()));
  }
  return matmul(transpose(a), g);
}

inline Tensor add_row(const Tensor& a, const Tensor& bias) {
  if (a.rank() != 2 || bias.size() != a.cols()) {
    throw ShapeError("add_row: bias " + shape_str(bias.shape()) + " does not fit " + shape_str(a.shape()));
  }
  Tensor out = a;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* r = out.data() + i * a.cols();
    for (std::size_t j = 0; j < a.cols(); ++j) r[j] += bias[j];
  }
  return out;
}

inline Tensor column_sums(const Tensor& a) {
  Tensor out(Shape{a.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i) axpy(1.0, a.data() + i * a.cols(), out.data(), a.cols());
  return out;
}

inline Tensor row_sum(const Tensor& a) {
  Tensor out(Shape{a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (double v : a.row(i)) s += v;
    out[i] = s;
  }
  return out;
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows()) {
    throw ShapeError("concat_cols: " + shape_str(a.shape()) + " , " + shape_str(b.shape()));
  }
  const std::size_t ca = a.cols(), cb = b.cols();
  Tensor out(Shape{a.rows(), ca + cb});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::copy_n(a.data() + i * ca, ca, out.data() + i * (ca + cb));
    std::copy_n(b.data() + i * cb, cb, out.data() + i * (ca + cb) + ca);
  }
  return out;
}

inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  Tensor out(Shape{a.rows(), count});
  for (std::size_t i = 0; i < a.rows(); ++i) std::copy_n(a.data() + i * a.cols() + begin, count, out.data() + i * count);
  return out;
}

inline double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return s;
}

inline void add_into(Tensor& acc, const Tensor& g) {
  require_same_shape(acc, g, "accumulate");
  axpy(1.0, g.data(), acc.data(), acc.size());
}

}  // namespace kernels
}  // namespace jacmatch
