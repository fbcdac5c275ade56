//
// Project retro - Copyright 2026 The retro Authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace retro::ad {

// Reverse-mode tape over dense double matrices. One tape per forward pass:
// build the graph with the ops below, call backward(loss) once, then read
// gradients. Double precision throughout so finite-difference checks are
// meaningful at 1e-3 relative error.

using Matrix = Eigen::MatrixXd;

/// A trainable tensor with its gradient accumulator and optimizer state.
/// Gradients are mutable so that inference over shared const parameters
/// stays const-correct; training owns parameters exclusively.
struct Param {
  std::string name;
  Matrix value;
  mutable Matrix grad;
  Matrix m, v;  // optimizer moments, lazily sized

  explicit Param(std::string name = {}) : name(std::move(name)) {}
  Param(std::string name, Matrix value)
      : name(std::move(name)), value(std::move(value)) {
    grad = Matrix::Zero(this->value.rows(), this->value.cols());
  }

  void zero_grad() const {
    grad = Matrix::Zero(value.rows(), value.cols());
  }
};

class Tape {
 public:
  using Id = int;

  /// Leaf that never receives a gradient.
  Id constant(Matrix v) { return push(std::move(v), false, {}); }

  /// Differentiable leaf not tied to a Param (used by gradient tests).
  Id input(Matrix v) { return push(std::move(v), true, {}); }

  /// Leaf bound to a Param; repeated use() of the same Param returns the
  /// same node so its gradient accumulates across every use site.
  Id use(const Param& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return it->second;
    const Id id = push(p.value, true, {});
    bound_.emplace(&p, id);
    return id;
  }

  const Matrix& value(Id id) const { return nodes_[id].value; }
  const Matrix& grad(Id id) const { return nodes_[id].grad; }

  Id matmul(Id a, Id b) {
    check_inner(a, b);
    Matrix out = nodes_[a].value * nodes_[b].value;
    return push(std::move(out), wants(a) || wants(b), [this, a, b](Id o) {
      if (wants(a)) nodes_[a].grad += nodes_[o].grad * nodes_[b].value.transpose();
      if (wants(b)) nodes_[b].grad += nodes_[a].value.transpose() * nodes_[o].grad;
    });
  }

  Id add(Id a, Id b) {
    check_same(a, b);
    Matrix out = nodes_[a].value + nodes_[b].value;
    return push(std::move(out), wants(a) || wants(b), [this, a, b](Id o) {
      if (wants(a)) nodes_[a].grad += nodes_[o].grad;
      if (wants(b)) nodes_[b].grad += nodes_[o].grad;
    });
  }

  Id sub(Id a, Id b) {
    check_same(a, b);
    Matrix out = nodes_[a].value - nodes_[b].value;
    return push(std::move(out), wants(a) || wants(b), [this, a, b](Id o) {
      if (wants(a)) nodes_[a].grad += nodes_[o].grad;
      if (wants(b)) nodes_[b].grad -= nodes_[o].grad;
    });
  }

  Id cwise_mul(Id a, Id b) {
    check_same(a, b);
    Matrix out = nodes_[a].value.cwiseProduct(nodes_[b].value);
    return push(std::move(out), wants(a) || wants(b), [this, a, b](Id o) {
      if (wants(a))
        nodes_[a].grad += nodes_[o].grad.cwiseProduct(nodes_[b].value);
      if (wants(b))
        nodes_[b].grad += nodes_[o].grad.cwiseProduct(nodes_[a].value);
    });
  }

  Id scale(Id a, double c) {
    Matrix out = nodes_[a].value * c;
    return push(std::move(out), wants(a), [this, a, c](Id o) {
      if (wants(a)) nodes_[a].grad += nodes_[o].grad * c;
    });
  }

  /// Adds a 1 x n bias row to every row of an m x n matrix.
  Id add_bias(Id a, Id bias) {
    if (nodes_[bias].value.rows() != 1 ||
        nodes_[a].value.cols() != nodes_[bias].value.cols())
      dim_error("add_bias", a, bias);
    Matrix out = nodes_[a].value.rowwise() + nodes_[bias].value.row(0);
    return push(std::move(out), wants(a) || wants(bias), [this, a, bias](Id o) {
      if (wants(a)) nodes_[a].grad += nodes_[o].grad;
      if (wants(bias)) nodes_[bias].grad += nodes_[o].grad.colwise().sum();
    });
  }

  Id relu(Id a) {
    Matrix out = nodes_[a].value.cwiseMax(0.0);
    return push(std::move(out), wants(a), [this, a](Id o) {
      if (!wants(a)) return;
      nodes_[a].grad += nodes_[o].grad.cwiseProduct(
          (nodes_[a].value.array() > 0.0).cast<double>().matrix());
    });
  }

  Id sigmoid(Id a) {
    Matrix out = nodes_[a].value.unaryExpr(
        [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    return push(std::move(out), wants(a), [this, a](Id o) {
      if (!wants(a)) return;
      const Matrix& y = nodes_[o].value;
      nodes_[a].grad += nodes_[o].grad.cwiseProduct(
          y.cwiseProduct(Matrix::Ones(y.rows(), y.cols()) - y));
    });
  }

  Id transpose(Id a) {
    Matrix out = nodes_[a].value.transpose();
    return push(std::move(out), wants(a), [this, a](Id o) {
      if (wants(a)) nodes_[a].grad += nodes_[o].grad.transpose();
    });
  }

  Id concat_cols(Id a, Id b) {
    if (nodes_[a].value.rows() != nodes_[b].value.rows())
      dim_error("concat_cols", a, b);
    Matrix out(nodes_[a].value.rows(),
               nodes_[a].value.cols() + nodes_[b].value.cols());
    out << nodes_[a].value, nodes_[b].value;
    return push(std::move(out), wants(a) || wants(b), [this, a, b](Id o) {
      const auto ca = nodes_[a].value.cols();
      const auto cb = nodes_[b].value.cols();
      if (wants(a)) nodes_[a].grad += nodes_[o].grad.leftCols(ca);
      if (wants(b)) nodes_[b].grad += nodes_[o].grad.rightCols(cb);
    });
  }

  Id concat_cols(Id a, Id b, Id c) { return concat_cols(concat_cols(a, b), c); }

  /// Stacks blocks vertically; all parts must share a column count.
  Id concat_rows(const std::vector<Id>& parts) {
    if (parts.empty())
      throw std::invalid_argument("concat_rows: empty part list");
    Eigen::Index rows = 0;
    const Eigen::Index cols = nodes_[parts.front()].value.cols();
    bool needs = false;
    for (Id p : parts) {
      if (nodes_[p].value.cols() != cols) dim_error("concat_rows", parts.front(), p);
      rows += nodes_[p].value.rows();
      needs = needs || wants(p);
    }
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    for (Id p : parts) {
      out.middleRows(at, nodes_[p].value.rows()) = nodes_[p].value;
      at += nodes_[p].value.rows();
    }
    return push(std::move(out), needs, [this, parts](Id o) {
      Eigen::Index at = 0;
      for (Id p : parts) {
        const Eigen::Index r = nodes_[p].value.rows();
        if (wants(p)) nodes_[p].grad += nodes_[o].grad.middleRows(at, r);
        at += r;
      }
    });
  }

  /// Gathers rows of a by index; repeated indices are allowed and their
  /// gradients accumulate.
  Id gather_rows(Id a, std::vector<int> idx) {
    Matrix out(static_cast<Eigen::Index>(idx.size()), nodes_[a].value.cols());
    for (std::size_t r = 0; r < idx.size(); ++r)
      out.row(static_cast<Eigen::Index>(r)) = nodes_[a].value.row(idx[r]);
    return push(std::move(out), wants(a),
                [this, a, idx = std::move(idx)](Id o) {
                  if (!wants(a)) return;
                  for (std::size_t r = 0; r < idx.size(); ++r)
                    nodes_[a].grad.row(idx[r]) +=
                        nodes_[o].grad.row(static_cast<Eigen::Index>(r));
                });
  }

  /// Sums rows of a into n_segments buckets given per-row segment ids.
  /// Empty segments come out as zero rows.
  Id segment_sum(Id a, std::vector<int> seg, int n_segments) {
    if (static_cast<std::size_t>(nodes_[a].value.rows()) != seg.size())
      throw std::invalid_argument("segment_sum: segment list length mismatch");
    Matrix out = Matrix::Zero(n_segments, nodes_[a].value.cols());
    for (std::size_t r = 0; r < seg.size(); ++r)
      out.row(seg[r]) += nodes_[a].value.row(static_cast<Eigen::Index>(r));
    return push(std::move(out), wants(a),
                [this, a, seg = std::move(seg)](Id o) {
                  if (!wants(a)) return;
                  for (std::size_t r = 0; r < seg.size(); ++r)
                    nodes_[a].grad.row(static_cast<Eigen::Index>(r)) +=
                        nodes_[o].grad.row(seg[r]);
                });
  }

  /// Row-wise softmax, numerically stabilized.
  Id softmax_rows(Id a) {
    Matrix out = nodes_[a].value;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      const double mx = out.row(r).maxCoeff();
      out.row(r) = (out.row(r).array() - mx).exp();
      out.row(r) /= out.row(r).sum();
    }
    return push(std::move(out), wants(a), [this, a](Id o) {
      if (!wants(a)) return;
      const Matrix& y = nodes_[o].value;
      const Matrix& dy = nodes_[o].grad;
      for (Eigen::Index r = 0; r < y.rows(); ++r) {
        const double dot = dy.row(r).dot(y.row(r));
        nodes_[a].grad.row(r) +=
            (dy.row(r).array() - dot).matrix().cwiseProduct(y.row(r));
      }
    });
  }

  /// Mean over all entries, as a 1x1 node.
  Id mean_all(Id a) {
    const double n = static_cast<double>(nodes_[a].value.size());
    Matrix out(1, 1);
    out(0, 0) = nodes_[a].value.sum() / n;
    return push(std::move(out), wants(a), [this, a, n](Id o) {
      if (wants(a))
        nodes_[a].grad.array() += nodes_[o].grad(0, 0) / n;
    });
  }

  Id sum_all(Id a) {
    Matrix out(1, 1);
    out(0, 0) = nodes_[a].value.sum();
    return push(std::move(out), wants(a), [this, a](Id o) {
      if (wants(a)) nodes_[a].grad.array() += nodes_[o].grad(0, 0);
    });
  }

  /// Mean binary cross entropy from logits, stable for large |z|:
  /// mean over entries of max(z,0) - z*t + log(1 + exp(-|z|)).
  Id bce_with_logits_mean(Id logits, const Matrix& targets) {
    const Matrix& z = nodes_[logits].value;
    if (z.rows() != targets.rows() || z.cols() != targets.cols())
      throw std::invalid_argument("bce_with_logits: target shape mismatch");
    const double n = static_cast<double>(z.size());
    double loss = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i)
      for (Eigen::Index j = 0; j < z.cols(); ++j) {
        const double zz = z(i, j);
        loss += std::max(zz, 0.0) - zz * targets(i, j) +
                std::log1p(std::exp(-std::abs(zz)));
      }
    Matrix out(1, 1);
    out(0, 0) = loss / n;
    return push(std::move(out), wants(logits),
                [this, logits, targets, n](Id o) {
                  if (!wants(logits)) return;
                  const Matrix& z = nodes_[logits].value;
                  const double g = nodes_[o].grad(0, 0) / n;
                  nodes_[logits].grad +=
                      g * (z.unaryExpr([](double x) {
                             return 1.0 / (1.0 + std::exp(-x));
                           }) -
                           targets);
                });
  }

  /// Mean squared error against a constant target.
  Id squared_error_mean(Id pred, const Matrix& targets) {
    const Matrix& p = nodes_[pred].value;
    if (p.rows() != targets.rows() || p.cols() != targets.cols())
      throw std::invalid_argument("squared_error: target shape mismatch");
    const double n = static_cast<double>(p.size());
    Matrix out(1, 1);
    out(0, 0) = (p - targets).squaredNorm() / n;
    return push(std::move(out), wants(pred), [this, pred, targets, n](Id o) {
      if (!wants(pred)) return;
      nodes_[pred].grad += nodes_[o].grad(0, 0) * 2.0 / n *
                           (nodes_[pred].value - targets);
    });
  }

  double scalar(Id a) const {
    if (nodes_[a].value.size() != 1)
      throw std::invalid_argument("scalar() on a non-1x1 node");
    return nodes_[a].value(0, 0);
  }

  /// Runs the reverse sweep from a 1x1 loss node and accumulates gradients
  /// into every bound Param.
  void backward(Id loss) {
    if (nodes_[loss].value.size() != 1)
      throw std::invalid_argument("backward() expects a 1x1 loss node");
    for (auto& n : nodes_)
      if (n.needs_grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    nodes_[loss].grad(0, 0) = 1.0;
    for (Id id = loss; id >= 0; --id)
      if (nodes_[id].backward && nodes_[id].needs_grad) nodes_[id].backward(id);
    for (const auto& [param, id] : bound_) param->grad += nodes_[id].grad;
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(Id)> backward;
    bool needs_grad = false;
  };

  bool wants(Id id) const { return nodes_[id].needs_grad; }

  Id push(Matrix value, bool needs_grad, std::function<void(Id)> backward) {
    Node n;
    n.value = std::move(value);
    if (needs_grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    n.backward = std::move(backward);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
  }

  void check_inner(Id a, Id b) const {
    if (nodes_[a].value.cols() != nodes_[b].value.rows())
      dim_error("matmul", a, b);
  }
  void check_same(Id a, Id b) const {
    if (nodes_[a].value.rows() != nodes_[b].value.rows() ||
        nodes_[a].value.cols() != nodes_[b].value.cols())
      dim_error("elementwise op", a, b);
  }
  [[noreturn]] void dim_error(const char* op, Id a, Id b) const {
    throw std::invalid_argument(
        std::string(op) + ": dimension mismatch (" +
        std::to_string(nodes_[a].value.rows()) + "x" +
        std::to_string(nodes_[a].value.cols()) + " vs " +
        std::to_string(nodes_[b].value.rows()) + "x" +
        std::to_string(nodes_[b].value.cols()) + ")");
  }

  std::vector<Node> nodes_;
  std::map<const Param*, Id> bound_;
};

}  // namespace retro::ad
