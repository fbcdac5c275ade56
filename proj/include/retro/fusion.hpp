//
// Project retro - Copyright 2026 The retro Authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "retro/autodiff.hpp"
#include "retro/dataset.hpp"
#include "retro/encoder.hpp"
#include "retro/evalkit.hpp"
#include "retro/nn.hpp"
#include "retro/retrieval.hpp"
#include "retro/rng.hpp"

namespace retro {

struct FusionConfig {
  int hidden_dim = 256;  // D, must match the encoder output
  int self_layers = 1;   // 0 runs the no-self-attention ablation
  int cross_layers = 2;
};

/// Reference fusion: a per-retriever conditioning MLP, parameter-free
/// attention layers, and the final classifier head.
struct FusionParams {
  FusionConfig config;
  int vocab_size = 0;
  nn::Mlp phi_mpc;      // 2D -> D
  nn::Mlp phi_nre;      // 2D -> D
  nn::Mlp classifier;   // 3D -> 2l -> l

  static FusionParams make(const FusionConfig& config, int vocab_size,
                           Rng& rng) {
    if (config.self_layers < 0)
      throw std::invalid_argument("negative self-attention layer count");
    if (config.cross_layers < 1)
      throw std::invalid_argument("cross-attention needs at least one layer");
    if (vocab_size < 1) throw std::invalid_argument("empty vocabulary");
    FusionParams p;
    p.config = config;
    p.vocab_size = vocab_size;
    const int d = config.hidden_dim;
    p.phi_mpc = nn::Mlp::make("fusion.phi_mpc", 2 * d, d, d, rng);
    p.phi_nre = nn::Mlp::make("fusion.phi_nre", 2 * d, d, d, rng);
    p.classifier =
        nn::Mlp::make("fusion.classifier", 3 * d, 2 * vocab_size, vocab_size, rng);
    return p;
  }

  std::vector<ad::Param*> params() {
    std::vector<ad::Param*> out;
    nn::append_params(out, phi_mpc.params());
    nn::append_params(out, phi_nre.params());
    nn::append_params(out, classifier.params());
    return out;
  }
};

/// Row k of the result is phi(ref_k || target): every reference is
/// conditioned on the same target representation.
inline Tape::Id condition_refs_on_tape(Tape& t, Tape::Id refs, Tape::Id target,
                                       const nn::Mlp& phi) {
  const auto k = t.value(refs).rows();
  if (t.value(target).rows() != 1 ||
      t.value(target).cols() != t.value(refs).cols())
    throw std::invalid_argument("condition_refs: target must be one row of "
                                "the reference width");
  const std::vector<int> zeros(static_cast<std::size_t>(k), 0);
  return phi.forward(t, t.concat_cols(refs, t.gather_rows(target, zeros)));
}

/// `layers` rounds of parameter-free scaled dot-product attention with the
/// current matrix serving as query, key, and value.
inline Tape::Id self_attend_on_tape(Tape& t, Tape::Id g, int layers) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(t.value(g).cols()));
  for (int s = 0; s < layers; ++s) {
    auto att = t.softmax_rows(t.scale(t.matmul(g, t.transpose(g)), scale));
    g = t.matmul(att, g);
  }
  return g;
}

/// `layers` rounds of query refinement against fixed keys and values.
inline Tape::Id cross_attend_on_tape(Tape& t, Tape::Id query, Tape::Id kv,
                                     int layers) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(t.value(kv).cols()));
  for (int c = 0; c < layers; ++c) {
    auto att = t.softmax_rows(t.scale(t.matmul(query, t.transpose(kv)), scale));
    query = t.matmul(att, kv);
  }
  return query;
}

inline Tape::Id classify_logits_on_tape(Tape& t, Tape::Id g_t, Tape::Id g_mpc,
                                        Tape::Id g_nre,
                                        const FusionParams& fusion) {
  return fusion.classifier.forward(t, t.concat_cols(g_t, g_mpc, g_nre));
}

/// Matrix-level convenience wrappers; each runs the tape path and reads
/// the value, so there is exactly one arithmetic implementation.
inline Matrix condition_refs(const Matrix& refs, const Matrix& target,
                             const nn::Mlp& phi) {
  Tape t;
  return t.value(
      condition_refs_on_tape(t, t.constant(refs), t.constant(target), phi));
}

inline Matrix self_attend(const Matrix& g, int layers) {
  Tape t;
  return t.value(self_attend_on_tape(t, t.constant(g), layers));
}

inline Matrix cross_attend(const Matrix& query, const Matrix& kv, int layers) {
  Tape t;
  return t.value(cross_attend_on_tape(t, t.constant(query), t.constant(kv),
                                      layers));
}

inline Eigen::VectorXd classify(const Eigen::VectorXd& g_t,
                                const Eigen::VectorXd& g_mpc,
                                const Eigen::VectorXd& g_nre,
                                const FusionParams& fusion) {
  const int d = fusion.config.hidden_dim;
  if (g_t.size() != d || g_mpc.size() != d || g_nre.size() != d)
    throw std::invalid_argument("classify: inputs must be length " +
                                std::to_string(d));
  Matrix cat(1, 3 * d);
  cat << g_t.transpose(), g_mpc.transpose(), g_nre.transpose();
  const Matrix z = fusion.classifier.forward(cat);
  Eigen::VectorXd probs(fusion.vocab_size);
  for (int i = 0; i < fusion.vocab_size; ++i)
    probs(i) = 1.0 / (1.0 + std::exp(-z(0, i)));
  return probs;
}

/// The whole trainable stack: one shared composition encoder plus fusion.
struct FullModel {
  EncoderParams encoder;
  FusionParams fusion;

  static FullModel make(const EncoderConfig& enc, const FusionConfig& fus,
                        int vocab_size, Rng& rng) {
    if (enc.hidden_dim != fus.hidden_dim)
      throw std::invalid_argument("encoder and fusion widths differ");
    FullModel m;
    m.encoder = EncoderParams::make(enc, rng);
    m.fusion = FusionParams::make(fus, vocab_size, rng);
    return m;
  }

  std::vector<ad::Param*> params() {
    auto out = encoder.params();
    nn::append_params(out, fusion.params());
    return out;
  }
};

/// References for one recipe, as knowledge-base recipe indices.
struct SampleRefs {
  std::vector<int> mpc;
  std::vector<int> nre;
};

namespace detail {

/// One fused batch: the target graphs of the samples followed by the
/// graphs of every distinct referenced knowledge-base recipe.
struct FusionBatchPlan {
  GraphBatch graphs;
  std::vector<int> target_row;              // per sample
  std::vector<std::vector<int>> mpc_rows;   // per sample, rows into the batch
  std::vector<std::vector<int>> nre_rows;
};

inline FusionBatchPlan plan_fusion_batch(
    const std::vector<const Composition*>& targets,
    const std::vector<const SampleRefs*>& refs, const KnowledgeBase& kb,
    const ElementFeatureTable& feats) {
  FusionBatchPlan plan;
  std::vector<CompositionGraph> graphs;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    plan.target_row.push_back(static_cast<int>(graphs.size()));
    graphs.push_back(build_graph(*targets[i], feats));
  }
  std::map<int, int> kb_row;  // kb recipe index -> row in the batch
  const auto row_of = [&](int kb_id) {
    auto it = kb_row.find(kb_id);
    if (it != kb_row.end()) return it->second;
    const int row = static_cast<int>(graphs.size());
    graphs.push_back(build_graph(
        kb.recipes[static_cast<std::size_t>(kb_id)].target, feats));
    kb_row.emplace(kb_id, row);
    return row;
  };
  for (std::size_t i = 0; i < refs.size(); ++i) {
    plan.mpc_rows.emplace_back();
    plan.nre_rows.emplace_back();
    for (int id : refs[i]->mpc) plan.mpc_rows.back().push_back(row_of(id));
    for (int id : refs[i]->nre) plan.nre_rows.back().push_back(row_of(id));
  }
  plan.graphs = GraphBatch::from(graphs);
  return plan;
}

}  // namespace detail

/// Differentiable batched forward producing per-sample logits (B x l).
/// A sample with no references on a branch (or with retrieval disabled)
/// contributes a zero vector for that branch, reducing the classifier to a
/// function of the target alone.
inline Tape::Id fusion_logits_on_tape(Tape& t,
                                      const detail::FusionBatchPlan& plan,
                                      FullModel& model,
                                      bool zero_retrieval = false) {
  const int d = model.fusion.config.hidden_dim;
  auto reps = encode_on_tape(t, plan.graphs, model.encoder);
  auto zero = t.constant(Matrix::Zero(1, d));
  std::vector<Tape::Id> rows;
  for (std::size_t i = 0; i < plan.target_row.size(); ++i) {
    auto g_t = t.gather_rows(reps, {plan.target_row[i]});
    const auto branch = [&](const std::vector<int>& ref_rows,
                            const nn::Mlp& phi) {
      if (zero_retrieval || ref_rows.empty()) return zero;
      auto refs = t.gather_rows(reps, ref_rows);
      auto conditioned = condition_refs_on_tape(t, refs, g_t, phi);
      auto enhanced =
          self_attend_on_tape(t, conditioned, model.fusion.config.self_layers);
      return cross_attend_on_tape(t, g_t, enhanced,
                                  model.fusion.config.cross_layers);
    };
    auto g_mpc = branch(plan.mpc_rows[i], model.fusion.phi_mpc);
    auto g_nre = branch(plan.nre_rows[i], model.fusion.phi_nre);
    rows.push_back(classify_logits_on_tape(t, g_t, g_mpc, g_nre, model.fusion));
  }
  return t.concat_rows(rows);
}

/// Inference probabilities for a batch of targets with fixed references.
inline Matrix predict_probabilities(FullModel& model,
                                    const std::vector<Composition>& targets,
                                    const std::vector<SampleRefs>& refs,
                                    const KnowledgeBase& kb,
                                    const ElementFeatureTable& feats,
                                    bool zero_retrieval = false) {
  if (targets.size() != refs.size())
    throw std::invalid_argument("predict: target/reference count mismatch");
  if (targets.empty()) return Matrix(0, model.fusion.vocab_size);
  std::vector<const Composition*> tptr;
  std::vector<const SampleRefs*> rptr;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    tptr.push_back(&targets[i]);
    rptr.push_back(&refs[i]);
  }
  const auto plan = detail::plan_fusion_batch(tptr, rptr, kb, feats);
  Tape t;
  const Matrix z = t.value(fusion_logits_on_tape(t, plan, model, zero_retrieval));
  return z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

/// Per-recipe references for a whole dataset, keyed by recipe id.
using RefTable = std::map<std::string, SampleRefs>;

struct FullTrainConfig {
  EncoderConfig encoder;
  FusionConfig fusion;
  int epochs = 500;
  int patience = 30;
  int batch_size = 128;
  double lr = 1e-4;
  double weight_decay = 1e-2;   // decoupled decay; 0 disables regularization
  std::uint64_t seed = 0;
  bool zero_retrieval = false;  // ablation: ignore all references
  DecodeConfig decode;          // for the validation metric
};

struct FullTrainReport {
  std::vector<double> train_loss;
  std::vector<double> valid_top5;
  int best_epoch = -1;
  double best_valid_top5 = 0.0;
  int epochs_run = 0;
};

namespace detail {

inline const SampleRefs& refs_for(const RefTable& table, const Recipe& r) {
  static const SampleRefs empty;
  const auto it = table.find(r.id);
  return it == table.end() ? empty : it->second;
}

inline void require_refs(const RefTable& table, const std::vector<Recipe>& rs,
                         const char* which) {
  std::string missing;
  int count = 0;
  for (const auto& r : rs)
    if (table.find(r.id) == table.end()) {
      if (count < 5) missing += (count ? ", " : "") + r.id;
      ++count;
    }
  if (count > 0)
    throw std::invalid_argument(std::string("missing ") + which +
                                " retrieval rows for " + std::to_string(count) +
                                " recipes (" + missing +
                                (count > 5 ? ", ..." : "") + ")");
}

}  // namespace detail

/// Trains encoder and fusion jointly with binary cross entropy over the
/// label vectors, early stopping on validation exact-match accuracy at
/// K=5 with the configured patience. The best-validation snapshot is
/// restored bitwise before returning.
inline FullModel train_full(const std::vector<Recipe>& train,
                            const std::vector<Recipe>& valid,
                            const KnowledgeBase& kb,
                            const ElementFeatureTable& feats,
                            const RefTable& mpc_refs, const RefTable& nre_refs,
                            const FullTrainConfig& config,
                            FullTrainReport* report = nullptr) {
  if (train.empty()) throw std::invalid_argument("train_full: empty training set");
  if (!config.zero_retrieval) {
    detail::require_refs(mpc_refs, train, "mpc");
    detail::require_refs(mpc_refs, valid, "mpc");
    detail::require_refs(nre_refs, train, "nre");
    detail::require_refs(nre_refs, valid, "nre");
  }
  const int l = static_cast<int>(train.front().label.size());
  Rng rng(mix_seed(config.seed, 0x66756c6c));
  FullModel model = FullModel::make(config.encoder, config.fusion, l, rng);
  auto param_list = model.params();
  nn::AdamW opt;
  opt.lr = config.lr;
  opt.weight_decay = config.weight_decay;

  const auto sample_refs = [&](const Recipe& r) {
    SampleRefs s;
    if (!config.zero_retrieval) {
      s.mpc = detail::refs_for(mpc_refs, r).mpc;
      s.nre = detail::refs_for(nre_refs, r).nre;
    }
    return s;
  };

  const auto make_plan = [&](const std::vector<Recipe>& recipes,
                             const std::vector<int>& idx,
                             std::vector<SampleRefs>& refs_storage) {
    std::vector<const Composition*> targets;
    std::vector<const SampleRefs*> refs;
    refs_storage.clear();
    refs_storage.reserve(idx.size());
    for (int i : idx)
      refs_storage.push_back(sample_refs(recipes[static_cast<std::size_t>(i)]));
    for (std::size_t r = 0; r < idx.size(); ++r) {
      targets.push_back(&recipes[static_cast<std::size_t>(idx[r])].target);
      refs.push_back(&refs_storage[r]);
    }
    return detail::plan_fusion_batch(targets, refs, kb, feats);
  };

  const auto labels_of = [&](const std::vector<Recipe>& recipes,
                             const std::vector<int>& idx) {
    Matrix y(static_cast<Eigen::Index>(idx.size()), l);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (int j = 0; j < l; ++j)
        y(static_cast<Eigen::Index>(r), j) =
            recipes[static_cast<std::size_t>(idx[r])].label[static_cast<std::size_t>(j)]
                ? 1.0
                : 0.0;
    return y;
  };

  std::vector<int> valid_idx(valid.size());
  std::iota(valid_idx.begin(), valid_idx.end(), 0);
  const auto eval_valid_top5 = [&]() {
    if (valid.empty()) return 0.0;
    std::vector<SampleRefs> storage;
    const auto plan = make_plan(valid, valid_idx, storage);
    Tape t;
    const Matrix z =
        t.value(fusion_logits_on_tape(t, plan, model, config.zero_retrieval));
    int hits = 0;
    for (std::size_t i = 0; i < valid.size(); ++i) {
      const auto& r = valid[i];
      if (r.has_oov()) continue;  // can never match; counts as a miss
      Eigen::VectorXd probs(l);
      for (int j = 0; j < l; ++j)
        probs(j) = 1.0 / (1.0 + std::exp(-z(static_cast<Eigen::Index>(i), j)));
      const auto pred = enumerate_sets(probs, std::min(config.decode.top_n, l),
                                       config.decode.max_size,
                                       std::max(config.decode.beam, 5));
      std::vector<int> gold = r.precursor_ids;
      std::sort(gold.begin(), gold.end());
      hits += exact_match_at_k(pred, gold, 5) ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(valid.size());
  };

  double best_top5 = -1.0;
  int best_epoch = -1;
  int stale = 0;
  nn::ParamSnapshot best = nn::ParamSnapshot::capture(param_list);

  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  int epochs_run = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    ++epochs_run;
    shuffle(order, rng);
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t at = 0; at < order.size();
         at += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end =
          std::min(order.size(), at + static_cast<std::size_t>(config.batch_size));
      const std::vector<int> idx(order.begin() + static_cast<std::ptrdiff_t>(at),
                                 order.begin() + static_cast<std::ptrdiff_t>(end));
      std::vector<SampleRefs> storage;
      const auto plan = make_plan(train, idx, storage);
      opt.zero_grad(param_list);
      Tape t;
      auto loss = t.bce_with_logits_mean(
          fusion_logits_on_tape(t, plan, model, config.zero_retrieval),
          labels_of(train, idx));
      const double loss_value = t.scalar(loss);
      if (!std::isfinite(loss_value))
        throw std::runtime_error("train_full: non-finite loss at epoch " +
                                 std::to_string(epoch));
      t.backward(loss);
      opt.step(param_list);
      epoch_loss += loss_value;
      ++batches;
    }
    epoch_loss /= std::max(1, batches);

    const double top5 = valid.empty() ? -epoch_loss : eval_valid_top5();
    if (report != nullptr) {
      report->train_loss.push_back(epoch_loss);
      report->valid_top5.push_back(valid.empty() ? 0.0 : top5);
    }
    if (top5 > best_top5) {
      best_top5 = top5;
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
    report->best_valid_top5 = valid.empty() ? 0.0 : best_top5;
    report->epochs_run = epochs_run;
  }
  return model;
}

}  // namespace retro
