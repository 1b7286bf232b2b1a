#pragma once

#include <cmath>

#include "jacmatch/tensor.hpp"

namespace jacmatch {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::size_t n, AdamOptions opt) : opt_(opt), m_(Shape{n}), v_(Shape{n}) {
    if (!(opt.lr > 0.0)) throw Error("learning rate must be positive");
  }

  /// In-place update of `params` with gradient `g`.
  void step(Tensor& params, const Tensor& g) {
    require_same_shape(params, g, "adam step");
    require_same_shape(params, m_, "adam state");
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g[i];
      v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g[i] * g[i];
      params[i] -= opt_.lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + opt_.eps);
    }
  }

  long steps() const { return t_; }

 private:
  AdamOptions opt_;
  Tensor m_, v_;
  long t_ = 0;
};

}  // namespace jacmatch
