//
// Project retro - Copyright 2026 The retro Authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cmath>
#include <vector>

#include "retro/autodiff.hpp"

namespace testutil {

struct GradCheckResult {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
};

/// Central-difference check of tape gradients for every entry of every
/// listed parameter. `build` must construct the full loss on a fresh tape
/// from the parameters' current values and return the 1x1 loss node.
/// Relative error uses max(|a| + |n|, 1e-4) in the denominator so entries
/// with near-zero gradient are judged on an absolute scale.
template <typename BuildLoss>
GradCheckResult check_gradients(const std::vector<retro::ad::Param*>& params,
                                BuildLoss build, double h = 1e-4) {
  for (auto* p : params) p->zero_grad();
  {
    retro::ad::Tape tape;
    auto loss = build(tape);
    tape.backward(loss);
  }
  std::vector<retro::ad::Matrix> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->grad);

  auto eval = [&]() {
    retro::ad::Tape tape;
    return tape.scalar(build(tape));
  };

  GradCheckResult res;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto* p = params[k];
    for (Eigen::Index i = 0; i < p->value.rows(); ++i)
      for (Eigen::Index j = 0; j < p->value.cols(); ++j) {
        const double saved = p->value(i, j);
        p->value(i, j) = saved + h;
        const double up = eval();
        p->value(i, j) = saved - h;
        const double down = eval();
        p->value(i, j) = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double a = analytic[k](i, j);
        const double abs_err = std::abs(a - numeric);
        const double rel_err =
            abs_err / std::max(std::abs(a) + std::abs(numeric), 1e-4);
        res.max_abs_err = std::max(res.max_abs_err, abs_err);
        res.max_rel_err = std::max(res.max_rel_err, rel_err);
      }
  }
  return res;
}

}  // namespace testutil
