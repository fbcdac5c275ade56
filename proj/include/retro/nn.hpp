//
// Project retro - Copyright 2026 The retro Authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "retro/autodiff.hpp"
#include "retro/rng.hpp"

namespace retro::nn {

using ad::Matrix;
using ad::Param;
using ad::Tape;

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, the usual default for
/// linear layers.
inline Matrix init_linear(Eigen::Index rows, Eigen::Index cols,
                          Eigen::Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Matrix w(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      w(i, j) = uniform_real(rng, -bound, bound);
  return w;
}

/// Two-layer perceptron x W1 + b1 -> ReLU -> W2 + b2. Weights are stored
/// input-major (in x out) so a batch forward is one GEMM per layer.
struct Mlp {
  Param w1, b1, w2, b2;

  static Mlp make(const std::string& name, Eigen::Index in, Eigen::Index hidden,
                  Eigen::Index out, Rng& rng) {
    Mlp m;
    m.w1 = Param(name + ".w1", init_linear(in, hidden, in, rng));
    m.b1 = Param(name + ".b1", init_linear(1, hidden, in, rng));
    m.w2 = Param(name + ".w2", init_linear(hidden, out, hidden, rng));
    m.b2 = Param(name + ".b2", init_linear(1, out, hidden, rng));
    return m;
  }

  Tape::Id forward(Tape& t, Tape::Id x) const {
    auto h = t.relu(t.add_bias(t.matmul(x, t.use(w1)), t.use(b1)));
    return t.add_bias(t.matmul(h, t.use(w2)), t.use(b2));
  }

  /// Tape-free forward for inference paths.
  Matrix forward(const Matrix& x) const {
    Matrix h = ((x * w1.value).rowwise() + b1.value.row(0)).cwiseMax(0.0);
    return (h * w2.value).rowwise() + b2.value.row(0);
  }

  std::vector<Param*> params() { return {&w1, &b1, &w2, &b2}; }
  std::vector<const Param*> params() const { return {&w1, &b1, &w2, &b2}; }
};

/// Single linear layer without bias, used for attention projections.
struct Linear {
  Param w;

  static Linear make(const std::string& name, Eigen::Index in,
                     Eigen::Index out, Rng& rng) {
    Linear l;
    l.w = Param(name + ".w", init_linear(in, out, in, rng));
    return l;
  }

  Tape::Id forward(Tape& t, Tape::Id x) const {
    return t.matmul(x, t.use(w));
  }
  Matrix forward(const Matrix& x) const { return x * w.value; }
};

/// Decoupled weight decay Adam. Decay multiplies the weight directly and is
/// skipped when weight_decay is zero.
struct AdamW {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
  long step_count = 0;

  void step(const std::vector<Param*>& params) {
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (Param* p : params) {
      if (p->m.size() == 0) {
        p->m = Matrix::Zero(p->value.rows(), p->value.cols());
        p->v = Matrix::Zero(p->value.rows(), p->value.cols());
      }
      if (weight_decay != 0.0) p->value *= (1.0 - lr * weight_decay);
      p->m = beta1 * p->m + (1.0 - beta1) * p->grad;
      p->v = beta2 * p->v + (1.0 - beta2) * p->grad.cwiseProduct(p->grad);
      const Matrix mhat = p->m / bc1;
      const Matrix vhat = p->v / bc2;
      p->value -=
          lr * mhat.cwiseQuotient(vhat.cwiseSqrt().array().matrix() +
                                  Matrix::Constant(vhat.rows(), vhat.cols(), eps));
    }
  }

  void zero_grad(const std::vector<Param*>& params) const {
    for (Param* p : params) p->zero_grad();
  }
};

inline void append_params(std::vector<Param*>& dst,
                          const std::vector<Param*>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

/// Bitwise copy of parameter values, for best-checkpoint restoration.
/// Optimizer moments are deliberately not captured: training continues
/// from restored weights with fresh statistics.
struct ParamSnapshot {
  std::vector<Matrix> values;

  static ParamSnapshot capture(const std::vector<Param*>& params) {
    ParamSnapshot s;
    s.values.reserve(params.size());
    for (const auto* p : params) s.values.push_back(p->value);
    return s;
  }
  void restore(const std::vector<Param*>& params) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      params[i]->value = values[i];
  }
};

}  // namespace retro::nn
