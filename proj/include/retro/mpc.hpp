//
// Project retro - Copyright 2026 The retro Authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "retro/autodiff.hpp"
#include "retro/dataset.hpp"
#include "retro/elements.hpp"
#include "retro/nn.hpp"
#include "retro/retrieval.hpp"
#include "retro/rng.hpp"

namespace retro {

using ad::Matrix;
using ad::Tape;

/// Masked precursor completion model: a composition MLP, a learnable
/// per-precursor embedding matrix, and bias-free cross-attention projections
/// that read the unmasked precursor embeddings.
struct MpcParams {
  int vocab_size = 0;
  int d_prime = 256;
  nn::Mlp compose;     // composition vector -> d'
  ad::Param embed;     // vocab_size x d'
  nn::Linear wq, wk, wv;  // d' -> d'

  static MpcParams make(int vocab_size, int d_prime, Rng& rng) {
    if (vocab_size < 1) throw std::invalid_argument("empty precursor vocabulary");
    MpcParams p;
    p.vocab_size = vocab_size;
    p.d_prime = d_prime;
    p.compose = nn::Mlp::make("mpc.compose", kNumElements, d_prime, d_prime, rng);
    p.embed = ad::Param("mpc.embed",
                        nn::init_linear(vocab_size, d_prime, d_prime, rng));
    p.wq = nn::Linear::make("mpc.wq", d_prime, d_prime, rng);
    p.wk = nn::Linear::make("mpc.wk", d_prime, d_prime, rng);
    p.wv = nn::Linear::make("mpc.wv", d_prime, d_prime, rng);
    return p;
  }

  std::vector<ad::Param*> params() {
    std::vector<ad::Param*> out;
    nn::append_params(out, compose.params());
    out.push_back(&embed);
    out.push_back(&wq.w);
    out.push_back(&wk.w);
    out.push_back(&wv.w);
    return out;
  }
};

/// Zeroes each positive entry independently with probability p_mask.
/// Negatives never flip, so the result is elementwise ≤ y.
inline std::vector<std::uint8_t> perturb_labels(
    const std::vector<std::uint8_t>& y, double p_mask, Rng& rng) {
  if (p_mask < 0.0 || p_mask > 1.0)
    throw std::invalid_argument("p_mask outside [0, 1]");
  std::vector<std::uint8_t> out = y;
  for (auto& v : out)
    if (v != 0 && bernoulli(rng, p_mask)) v = 0;
  return out;
}

namespace detail {

inline std::vector<int> unmasked_indices(const std::vector<std::uint8_t>& y) {
  std::vector<int> idx;
  for (std::size_t i = 0; i < y.size(); ++i)
    if (y[i] != 0) idx.push_back(static_cast<int>(i));
  return idx;
}

}  // namespace detail

/// Batched training forward. Row b of the result holds the per-precursor
/// logits for sample b; attention context comes from that sample's own
/// unmasked precursor rows. An all-masked sample falls back to its raw
/// composition representation.
inline Tape::Id mpc_logits_on_tape(
    Tape& t, const Matrix& x, const std::vector<std::vector<std::uint8_t>>& y_tilde,
    const MpcParams& params) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(params.d_prime));
  auto m = params.compose.forward(t, t.constant(x));
  auto p = t.use(params.embed);
  std::vector<Tape::Id> rows;
  rows.reserve(y_tilde.size());
  for (std::size_t b = 0; b < y_tilde.size(); ++b) {
    auto mb = t.gather_rows(m, {static_cast<int>(b)});
    const auto idx = detail::unmasked_indices(y_tilde[b]);
    if (idx.empty()) {
      rows.push_back(mb);
      continue;
    }
    auto ctx = t.gather_rows(p, idx);
    auto q = params.wq.forward(t, mb);
    auto k = params.wk.forward(t, ctx);
    auto v = params.wv.forward(t, ctx);
    auto att = t.softmax_rows(t.scale(t.matmul(q, t.transpose(k)), inv_sqrt_d));
    rows.push_back(t.matmul(att, v));
  }
  auto s = t.concat_rows(rows);
  return t.matmul(s, t.transpose(p));
}

/// Per-precursor probabilities for one composition vector.
inline Eigen::VectorXd mpc_forward(const Eigen::VectorXd& x,
                                   const std::vector<std::uint8_t>& y_tilde,
                                   const MpcParams& params) {
  if (static_cast<int>(y_tilde.size()) != params.vocab_size)
    throw std::invalid_argument("y_tilde length does not match vocabulary");
  Tape t;
  auto logits =
      mpc_logits_on_tape(t, x.transpose(), {y_tilde}, params);
  const Matrix z = t.value(logits);
  Eigen::VectorXd probs(params.vocab_size);
  for (int i = 0; i < params.vocab_size; ++i)
    probs(i) = 1.0 / (1.0 + std::exp(-z(0, i)));
  return probs;
}

/// The raw (unnormalized) composition representation used for retrieval.
inline Eigen::VectorXd mpc_rep(const Eigen::VectorXd& x,
                               const MpcParams& params) {
  return params.compose.forward(x.transpose()).row(0).transpose();
}

struct MpcTrainConfig {
  int d_prime = 256;
  int epochs = 1000;
  int patience = 50;
  int batch_size = 128;
  double lr = 1e-4;
  double p_mask = 0.5;
  std::uint64_t seed = 0;
};

struct MpcTrainReport {
  std::vector<double> train_loss;  // per epoch
  std::vector<double> valid_loss;
  int best_epoch = -1;
  double best_valid = 0.0;
};

namespace detail {

inline Matrix stack_compositions(const std::vector<Recipe>& recipes,
                                 const std::vector<int>& order) {
  Matrix x(static_cast<Eigen::Index>(order.size()), kNumElements);
  for (std::size_t r = 0; r < order.size(); ++r)
    x.row(static_cast<Eigen::Index>(r)) = recipes[order[r]].target.vector.transpose();
  return x;
}

inline Matrix stack_labels(const std::vector<Recipe>& recipes,
                           const std::vector<int>& order) {
  const auto l = recipes[order.front()].label.size();
  Matrix y(static_cast<Eigen::Index>(order.size()),
           static_cast<Eigen::Index>(l));
  for (std::size_t r = 0; r < order.size(); ++r)
    for (std::size_t j = 0; j < l; ++j)
      y(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) =
          recipes[order[r]].label[j] ? 1.0 : 0.0;
  return y;
}

}  // namespace detail

/// Trains the completion model with binary cross entropy against the
/// unperturbed labels. Masks are resampled every epoch on the training
/// side; validation masks are drawn once up front so the early-stopping
/// signal compares like against like across epochs. The returned
/// parameters are the bitwise best-validation snapshot.
inline MpcParams train_mpc(const std::vector<Recipe>& train,
                           const std::vector<Recipe>& valid,
                           const MpcTrainConfig& config,
                           MpcTrainReport* report = nullptr) {
  if (train.empty()) throw std::invalid_argument("train_mpc: empty training set");
  const int l = static_cast<int>(train.front().label.size());
  Rng rng(mix_seed(config.seed, 0x6d7063));
  MpcParams params = MpcParams::make(l, config.d_prime, rng);
  auto param_list = params.params();
  nn::AdamW opt;
  opt.lr = config.lr;

  std::vector<std::vector<std::uint8_t>> valid_masks;
  for (const auto& r : valid)
    valid_masks.push_back(perturb_labels(r.label, config.p_mask, rng));
  std::vector<int> valid_order(valid.size());
  std::iota(valid_order.begin(), valid_order.end(), 0);

  const auto eval_valid = [&]() {
    if (valid.empty()) return 0.0;
    Tape t;
    auto logits = mpc_logits_on_tape(
        t, detail::stack_compositions(valid, valid_order), valid_masks, params);
    return t.scalar(t.bce_with_logits_mean(
        logits, detail::stack_labels(valid, valid_order)));
  };

  double best_valid = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  int stale = 0;
  nn::ParamSnapshot best = nn::ParamSnapshot::capture(param_list);

  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle(order, rng);
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t at = 0; at < order.size();
         at += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end =
          std::min(order.size(), at + static_cast<std::size_t>(config.batch_size));
      const std::vector<int> batch(order.begin() + static_cast<std::ptrdiff_t>(at),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      std::vector<std::vector<std::uint8_t>> masks;
      masks.reserve(batch.size());
      for (int i : batch)
        masks.push_back(perturb_labels(train[i].label, config.p_mask, rng));
      opt.zero_grad(param_list);
      Tape t;
      auto logits = mpc_logits_on_tape(
          t, detail::stack_compositions(train, batch), masks, params);
      auto loss =
          t.bce_with_logits_mean(logits, detail::stack_labels(train, batch));
      const double loss_value = t.scalar(loss);
      if (!std::isfinite(loss_value))
        throw std::runtime_error("train_mpc: non-finite loss at epoch " +
                                 std::to_string(epoch));
      t.backward(loss);
      opt.step(param_list);
      epoch_loss += loss_value;
      ++batches;
    }
    epoch_loss /= std::max(1, batches);

    const double vloss = valid.empty() ? epoch_loss : eval_valid();
    if (report != nullptr) {
      report->train_loss.push_back(epoch_loss);
      report->valid_loss.push_back(vloss);
    }
    if (vloss < best_valid) {
      best_valid = vloss;
      best_epoch = epoch;
      best = nn::ParamSnapshot::capture(param_list);
      stale = 0;
    } else if (++stale >= config.patience) {
      break;
    }
  }
  best.restore(param_list);
  if (report != nullptr) {
    report->best_epoch = best_epoch;
    report->best_valid = best_valid;
  }
  return params;
}

/// Frozen retrieval index: unit-normalized knowledge-base representations
/// plus the exact composition vectors for duplicate detection.
struct MpcIndex {
  Matrix reps;   // count x d', rows unit length
  Matrix comps;  // count x 118
  std::vector<int> ids;

  int size() const { return static_cast<int>(ids.size()); }
};

inline MpcIndex build_mpc_index(const KnowledgeBase& kb,
                                const MpcParams& params) {
  MpcIndex index;
  const int n = static_cast<int>(kb.recipes.size());
  index.reps = Matrix(n, params.d_prime);
  index.comps = Matrix(n, kNumElements);
  for (int j = 0; j < n; ++j) {
    Eigen::VectorXd m = mpc_rep(kb.recipes[j].target.vector, params);
    const double norm = m.norm();
    if (norm > 0.0) m /= norm;
    index.reps.row(j) = m.transpose();
    index.comps.row(j) = kb.recipes[j].target.vector.transpose();
    index.ids.push_back(j);
  }
  return index;
}

/// Top-K by cosine similarity, descending, ties by ascending recipe index.
/// When `exclude` is given the query is a training recipe: its own id and
/// any composition-identical entry are skipped so a recipe can never act
/// as its own reference. Without `exclude` nothing is skipped and an exact
/// match ranks first with similarity 1.
inline RetrievalSet retrieve_mpc_from_rep(const Eigen::VectorXd& rep,
                                          const Eigen::VectorXd& target_comp,
                                          const MpcIndex& index, int k,
                                          std::optional<int> exclude = {}) {
  if (k < 1) throw std::invalid_argument("retrieve_mpc: K must be at least 1");
  if (index.size() == 0)
    throw std::invalid_argument("retrieve_mpc: empty index");
  Eigen::VectorXd q = rep;
  const double norm = q.norm();
  if (norm > 0.0) q /= norm;
  const Eigen::VectorXd sims = index.reps * q;

  std::vector<int> eligible;
  for (int r = 0; r < index.size(); ++r) {
    if (exclude.has_value()) {
      if (index.ids[r] == *exclude) continue;
      if (index.comps.row(r).transpose() == target_comp) continue;
    }
    eligible.push_back(r);
  }
  std::sort(eligible.begin(), eligible.end(), [&](int a, int b) {
    if (sims(a) != sims(b)) return sims(a) > sims(b);
    return index.ids[a] < index.ids[b];
  });

  RetrievalSet out;
  const int take = std::min<int>(k, static_cast<int>(eligible.size()));
  for (int r = 0; r < take; ++r) out.ids.push_back(index.ids[eligible[r]]);
  out.short_result = take < k;
  return out;
}

inline RetrievalSet retrieve_mpc(const Composition& target,
                                 const MpcParams& params, const MpcIndex& index,
                                 int k, std::optional<int> exclude = {}) {
  return retrieve_mpc_from_rep(mpc_rep(target.vector, params), target.vector,
                               index, k, exclude);
}

}  // namespace retro
