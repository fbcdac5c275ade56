//
// Project retro - Copyright 2026 The retro Authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "retro/composition.hpp"
#include "retro/dataset.hpp"
#include "retro/encoder.hpp"
#include "retro/nn.hpp"
#include "retro/retrieval.hpp"
#include "retro/rng.hpp"

namespace retro {

enum class EnergyKind { dft, experimental };

struct EnergyEntry {
  Composition comp;
  double energy = 0.0;  // eV/atom
};

/// Formation-energy table keyed by canonical formula. Duplicate formulas
/// collapse to the last occurrence; the drop count is kept for reporting.
struct EnergyTable {
  EnergyKind kind = EnergyKind::dft;
  std::vector<EnergyEntry> entries;
  int duplicates_dropped = 0;

  int size() const { return static_cast<int>(entries.size()); }
};

/// Reads a `formula,energy_per_atom` CSV. Malformed rows are hard errors
/// naming the line: energy tables are curated inputs, not scraped feeds.
inline EnergyTable load_energy_table(const std::filesystem::path& path,
                                     EnergyKind kind) {
  std::ifstream in(path);
  if (!in)
    throw std::runtime_error("cannot open energy table " + path.string());
  EnergyTable table;
  table.kind = kind;
  std::string line;
  if (!std::getline(in, line) || line != "formula,energy_per_atom")
    throw std::runtime_error(path.string() +
                             ": expected header formula,energy_per_atom");
  std::map<std::string, std::size_t> seen;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": missing comma");
    EnergyEntry e;
    e.comp = parse_formula(line.substr(0, comma));
    const std::string value = line.substr(comma + 1);
    std::size_t used = 0;
    try {
      e.energy = std::stod(value, &used);
    } catch (const std::exception&) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": bad energy value '" + value + "'");
    }
    if (used != value.size() || !std::isfinite(e.energy))
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": bad energy value '" + value + "'");
    const std::string key = canonical_formula(e.comp);
    auto it = seen.find(key);
    if (it != seen.end()) {
      table.entries[it->second] = e;
      ++table.duplicates_dropped;
    } else {
      seen.emplace(key, table.entries.size());
      table.entries.push_back(std::move(e));
    }
  }
  return table;
}

inline void write_energy_table(const std::filesystem::path& path,
                               const EnergyTable& table) {
  std::ofstream out(path);
  if (!out)
    throw std::runtime_error("cannot write energy table " + path.string());
  out << "formula,energy_per_atom\n";
  out.precision(17);
  for (const auto& e : table.entries)
    out << canonical_formula(e.comp) << ',' << e.energy << '\n';
}

/// Energy regressor: the shared graph encoder plus a linear head.
struct NreParams {
  EncoderParams encoder;
  ad::Param head_w;  // D x 1
  ad::Param head_b;  // 1 x 1

  static NreParams make(const EncoderConfig& config, Rng& rng) {
    NreParams p;
    p.encoder = EncoderParams::make(config, rng);
    p.head_w = ad::Param("nre.head.w", nn::init_linear(config.hidden_dim, 1,
                                                       config.hidden_dim, rng));
    p.head_b = ad::Param("nre.head.b", nn::init_linear(1, 1, config.hidden_dim, rng));
    return p;
  }

  std::vector<ad::Param*> params() {
    auto out = encoder.params();
    out.push_back(&head_w);
    out.push_back(&head_b);
    return out;
  }
};

inline Tape::Id nre_predict_on_tape(Tape& t, const GraphBatch& batch,
                                    const NreParams& params) {
  auto g = encode_on_tape(t, batch, params.encoder);
  return t.add_bias(t.matmul(g, t.use(params.head_w)), t.use(params.head_b));
}

inline double predict_energy(const Composition& c, const NreParams& params,
                             const ElementFeatureTable& feats) {
  const Eigen::VectorXd g = encode(build_graph(c, feats), params.encoder);
  return g.dot(params.head_w.value.col(0)) + params.head_b.value(0, 0);
}

/// Reaction enthalpy proxy on already-predicted energies: target energy
/// minus the unweighted mean of the precursor energies, eV/atom.
inline double delta_h_value(double h_target,
                            const std::vector<double>& h_precursors) {
  if (h_precursors.empty())
    throw std::invalid_argument("delta_h: empty precursor set");
  double sum = 0.0;
  for (double h : h_precursors) sum += h;
  return h_target - sum / static_cast<double>(h_precursors.size());
}

inline double delta_h(const Composition& target,
                      const std::vector<Composition>& precursor_set,
                      const NreParams& params,
                      const ElementFeatureTable& feats) {
  if (precursor_set.empty())
    throw std::invalid_argument("delta_h: empty precursor set");
  std::vector<double> hs;
  hs.reserve(precursor_set.size());
  for (const auto& p : precursor_set)
    hs.push_back(predict_energy(p, params, feats));
  return delta_h_value(predict_energy(target, params, feats), hs);
}

enum class FilterMode {
  subset,    // precursor elements within target elements plus C, H, O, N
  coverage,  // subset, and precursors jointly contain every target element
};

namespace detail {

inline std::set<std::string> element_set(const Composition& c) {
  std::set<std::string> out;
  for (const auto& [sym, amt] : c.amounts) out.insert(sym);
  return out;
}

}  // namespace detail

/// A recipe is eligible when every element of every precursor appears in
/// the target or is one of the common processing elements C, H, O, N.
/// Coverage mode additionally demands the precursors jointly contain each
/// target element.
inline bool element_filter(const Composition& target, const Recipe& recipe,
                           const PrecursorVocabulary& vocab,
                           FilterMode mode = FilterMode::subset) {
  auto allowed = detail::element_set(target);
  allowed.insert("C");
  allowed.insert("H");
  allowed.insert("O");
  allowed.insert("N");
  std::set<std::string> joint;
  for (int id : recipe.precursor_ids) {
    const Composition p = parse_formula(vocab.precursors[static_cast<std::size_t>(id)]);
    for (const auto& [sym, amt] : p.amounts) {
      if (allowed.find(sym) == allowed.end()) return false;
      joint.insert(sym);
    }
  }
  if (mode == FilterMode::coverage)
    for (const auto& sym : detail::element_set(target))
      if (joint.find(sym) == joint.end()) return false;
  return true;
}

/// Per-recipe candidate scores for one target: the enthalpy proxy where
/// eligible, NaN elsewhere so accidental use is loud.
struct CandidateScores {
  std::vector<double> dh;
  std::vector<std::uint8_t> eligible;
};

/// Frozen per-vocabulary-entry predicted energies and per-recipe means,
/// computed once per (knowledge base, parameters) pair.
struct KbEnergyCache {
  std::vector<double> vocab_energy;        // per vocabulary entry
  std::vector<double> recipe_mean_energy;  // per recipe, mean over its set
  std::vector<Composition> vocab_comps;

  static KbEnergyCache build(const KnowledgeBase& kb, const NreParams& params,
                             const ElementFeatureTable& feats) {
    KbEnergyCache cache;
    for (const auto& f : kb.vocab.precursors) {
      cache.vocab_comps.push_back(parse_formula(f));
      cache.vocab_energy.push_back(
          predict_energy(cache.vocab_comps.back(), params, feats));
    }
    for (const auto& r : kb.recipes) {
      double sum = 0.0;
      for (int id : r.precursor_ids)
        sum += cache.vocab_energy[static_cast<std::size_t>(id)];
      cache.recipe_mean_energy.push_back(
          r.precursor_ids.empty()
              ? std::numeric_limits<double>::quiet_NaN()
              : sum / static_cast<double>(r.precursor_ids.size()));
    }
    return cache;
  }
};

inline CandidateScores score_candidates(const Composition& target,
                                        const KnowledgeBase& kb,
                                        const NreParams& params,
                                        const ElementFeatureTable& feats,
                                        const KbEnergyCache& cache,
                                        FilterMode mode = FilterMode::subset) {
  CandidateScores s;
  const double h_target = predict_energy(target, params, feats);
  const int n = kb.size();
  s.dh.assign(static_cast<std::size_t>(n),
              std::numeric_limits<double>::quiet_NaN());
  s.eligible.assign(static_cast<std::size_t>(n), 0);
  for (int j = 0; j < n; ++j) {
    const auto& r = kb.recipes[static_cast<std::size_t>(j)];
    if (r.precursor_ids.empty()) continue;
    if (!element_filter(target, r, kb.vocab, mode)) continue;
    s.eligible[static_cast<std::size_t>(j)] = 1;
    s.dh[static_cast<std::size_t>(j)] =
        h_target - cache.recipe_mean_energy[static_cast<std::size_t>(j)];
  }
  return s;
}

/// Ascending enthalpy over eligible candidates, ties by ascending recipe
/// index, the excluded id dropped. Shorter-than-K results are flagged.
inline RetrievalSet rank_by_delta_h(const CandidateScores& scores, int k,
                                    std::optional<int> exclude = {}) {
  if (k < 1) throw std::invalid_argument("retrieve_nre: K must be at least 1");
  std::vector<int> ids;
  for (int j = 0; j < static_cast<int>(scores.dh.size()); ++j) {
    if (!scores.eligible[static_cast<std::size_t>(j)]) continue;
    if (exclude.has_value() && j == *exclude) continue;
    ids.push_back(j);
  }
  std::sort(ids.begin(), ids.end(), [&](int a, int b) {
    const double da = scores.dh[static_cast<std::size_t>(a)];
    const double db = scores.dh[static_cast<std::size_t>(b)];
    if (da != db) return da < db;
    return a < b;
  });
  RetrievalSet out;
  const int take = std::min<int>(k, static_cast<int>(ids.size()));
  out.ids.assign(ids.begin(), ids.begin() + take);
  out.short_result = take < k;
  return out;
}

inline RetrievalSet retrieve_nre(const Composition& target,
                                 const KnowledgeBase& kb,
                                 const NreParams& params,
                                 const ElementFeatureTable& feats, int k,
                                 std::optional<int> exclude = {},
                                 FilterMode mode = FilterMode::subset) {
  const auto cache = KbEnergyCache::build(kb, params, feats);
  return rank_by_delta_h(score_candidates(target, kb, params, feats, cache, mode),
                         k, exclude);
}

/// Enthalpy proxies for many targets against the whole knowledge base,
/// computed ahead of training so the training loop never touches the
/// regressor.
struct DeltaHTable {
  Matrix dh;                      // n_targets x n_kb, NaN where ineligible
  std::vector<std::uint8_t> eligible;  // row-major n_targets x n_kb

  bool is_eligible(int t, int j, int n_kb) const {
    return eligible[static_cast<std::size_t>(t) * static_cast<std::size_t>(n_kb) +
                    static_cast<std::size_t>(j)] != 0;
  }
  CandidateScores row(int t) const {
    CandidateScores s;
    const auto n = dh.cols();
    s.dh.resize(static_cast<std::size_t>(n));
    s.eligible.resize(static_cast<std::size_t>(n));
    for (Eigen::Index j = 0; j < n; ++j) {
      s.dh[static_cast<std::size_t>(j)] = dh(t, j);
      s.eligible[static_cast<std::size_t>(j)] =
          eligible[static_cast<std::size_t>(t) * static_cast<std::size_t>(n) +
                   static_cast<std::size_t>(j)];
    }
    return s;
  }
};

inline DeltaHTable precompute_delta_h(const std::vector<Composition>& targets,
                                      const KnowledgeBase& kb,
                                      const NreParams& params,
                                      const ElementFeatureTable& feats,
                                      FilterMode mode = FilterMode::subset) {
  DeltaHTable table;
  const int n = kb.size();
  table.dh = Matrix(static_cast<Eigen::Index>(targets.size()), n);
  table.eligible.assign(targets.size() * static_cast<std::size_t>(n), 0);
  const auto cache = KbEnergyCache::build(kb, params, feats);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const auto s = score_candidates(targets[t], kb, params, feats, cache, mode);
    for (int j = 0; j < n; ++j) {
      table.dh(static_cast<Eigen::Index>(t), j) = s.dh[static_cast<std::size_t>(j)];
      table.eligible[t * static_cast<std::size_t>(n) + static_cast<std::size_t>(j)] =
          s.eligible[static_cast<std::size_t>(j)];
    }
  }
  return table;
}

struct RegressorTrainReport {
  std::vector<double> train_loss;
  std::vector<double> valid_loss;
  int best_epoch = -1;
  double best_valid = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline std::vector<CompositionGraph> build_entry_graphs(
    const EnergyTable& table, const ElementFeatureTable& feats) {
  std::vector<CompositionGraph> out;
  out.reserve(table.entries.size());
  for (const auto& e : table.entries) out.push_back(build_graph(e.comp, feats));
  return out;
}

/// Minimizes mean squared error over the index subset `train`, early
/// stopping on `valid`, and restores the best-validation snapshot bitwise.
inline void train_regressor(NreParams& params, const EnergyTable& table,
                            const std::vector<CompositionGraph>& graphs,
                            const std::vector<int>& train,
                            const std::vector<int>& valid, int epochs,
                            int patience, int batch_size, double lr, Rng& rng,
                            RegressorTrainReport* report) {
  auto param_list = params.params();
  nn::AdamW opt;
  opt.lr = lr;

  const auto batch_loss_graph = [&](const std::vector<int>& idx) {
    std::vector<CompositionGraph> gs;
    Matrix y(static_cast<Eigen::Index>(idx.size()), 1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      gs.push_back(graphs[static_cast<std::size_t>(idx[r])]);
      y(static_cast<Eigen::Index>(r), 0) =
          table.entries[static_cast<std::size_t>(idx[r])].energy;
    }
    return std::pair(GraphBatch::from(gs), y);
  };

  const auto eval_mse = [&](const std::vector<int>& idx) {
    if (idx.empty()) return 0.0;
    auto [batch, y] = batch_loss_graph(idx);
    const Matrix pred =
        (encode_batch_values(batch, params.encoder) * params.head_w.value)
            .rowwise() +
        params.head_b.value.row(0);
    return (pred - y).squaredNorm() / static_cast<double>(y.size());
  };

  double best_valid = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  int stale = 0;
  nn::ParamSnapshot best = nn::ParamSnapshot::capture(param_list);

  std::vector<int> order = train;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    shuffle(order, rng);
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t at = 0; at < order.size();
         at += static_cast<std::size_t>(batch_size)) {
      const std::size_t end =
          std::min(order.size(), at + static_cast<std::size_t>(batch_size));
      const std::vector<int> idx(order.begin() + static_cast<std::ptrdiff_t>(at),
                                 order.begin() + static_cast<std::ptrdiff_t>(end));
      auto [batch, y] = batch_loss_graph(idx);
      opt.zero_grad(param_list);
      Tape t;
      auto loss = t.squared_error_mean(nre_predict_on_tape(t, batch, params), y);
      const double loss_value = t.scalar(loss);
      if (!std::isfinite(loss_value))
        throw std::runtime_error("energy regressor: non-finite loss at epoch " +
                                 std::to_string(epoch));
      t.backward(loss);
      opt.step(param_list);
      epoch_loss += loss_value;
      ++batches;
    }
    epoch_loss /= std::max(1, batches);

    const double vloss = valid.empty() ? epoch_loss : eval_mse(valid);
    if (report != nullptr) {
      report->train_loss.push_back(epoch_loss);
      report->valid_loss.push_back(vloss);
    }
    if (vloss < best_valid) {
      best_valid = vloss;
      best_epoch = epoch;
      best = nn::ParamSnapshot::capture(param_list);
      stale = 0;
    } else if (++stale >= patience) {
      break;
    }
  }
  best.restore(param_list);
  if (report != nullptr) {
    report->best_epoch = best_epoch;
    report->best_valid = best_valid;
  }
}

/// Deterministic 80/10/10 index split.
struct IndexSplit {
  std::vector<int> train, valid, test;
};

inline IndexSplit split_indices(int n, Rng& rng) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  shuffle(order, rng);
  IndexSplit s;
  const int n_train = n * 8 / 10;
  const int n_valid = n / 10;
  s.train.assign(order.begin(), order.begin() + n_train);
  s.valid.assign(order.begin() + n_train, order.begin() + n_train + n_valid);
  s.test.assign(order.begin() + n_train + n_valid, order.end());
  return s;
}

inline double mae_over(const NreParams& params, const EnergyTable& table,
                       const std::vector<int>& idx,
                       const ElementFeatureTable& feats) {
  if (idx.empty()) return std::numeric_limits<double>::quiet_NaN();
  double sum = 0.0;
  for (int i : idx) {
    const auto& e = table.entries[static_cast<std::size_t>(i)];
    sum += std::abs(predict_energy(e.comp, params, feats) - e.energy);
  }
  return sum / static_cast<double>(idx.size());
}

}  // namespace detail

struct NreTrainConfig {
  EncoderConfig encoder;
  int pretrain_epochs = 1000;
  int finetune_epochs = 1000;
  int patience = 50;
  int batch_size = 128;
  double lr = 1e-4;
  bool pretrain = true;
  std::uint64_t seed = 0;
};

struct NreTrainReport {
  RegressorTrainReport pretrain;
  RegressorTrainReport finetune;
  RegressorTrainReport exp_only;
  std::vector<Matrix> finetune_start_values;  // snapshot entering fine-tuning
  double finetuned_test_mae = std::numeric_limits<double>::quiet_NaN();
  double exp_only_test_mae = std::numeric_limits<double>::quiet_NaN();
};

/// Pretraining phase alone: fresh parameters fit to the DFT-style table,
/// best-validation snapshot returned.
inline NreParams nre_pretrain(const EnergyTable& dft,
                              const ElementFeatureTable& feats,
                              const NreTrainConfig& config,
                              RegressorTrainReport* report = nullptr) {
  if (dft.size() == 0) throw std::invalid_argument("empty pretraining table");
  Rng init_rng(mix_seed(config.seed, 0x6e7265));
  NreParams params = NreParams::make(config.encoder, init_rng);
  Rng split_rng(mix_seed(config.seed, 10));
  const auto split = detail::split_indices(dft.size(), split_rng);
  const auto graphs = detail::build_entry_graphs(dft, feats);
  Rng loop_rng(mix_seed(config.seed, 2));
  detail::train_regressor(params, dft, graphs, split.train, split.valid,
                          config.pretrain_epochs, config.patience,
                          config.batch_size, config.lr, loop_rng, report);
  return params;
}

/// Full comparison protocol. With pretraining on, fits the DFT table, then
/// continues on the experimental table from the bitwise pretrain-best
/// snapshot, and separately trains an identically initialized model on the
/// experimental table alone; test MAE of both goes into the report. With
/// pretraining off, only the experimental-only branch runs and its model
/// is returned.
inline NreParams pretrain_then_finetune(const EnergyTable& dft,
                                        const EnergyTable& exp,
                                        const ElementFeatureTable& feats,
                                        const NreTrainConfig& config,
                                        NreTrainReport* report = nullptr) {
  if (exp.size() == 0) throw std::invalid_argument("empty experimental table");
  Rng exp_split_rng(mix_seed(config.seed, 11));
  const auto exp_split = detail::split_indices(exp.size(), exp_split_rng);
  const auto exp_graphs = detail::build_entry_graphs(exp, feats);

  const auto run_exp_only = [&](RegressorTrainReport* rep) {
    Rng init_rng(mix_seed(config.seed, 0x6e7265));
    NreParams params = NreParams::make(config.encoder, init_rng);
    Rng loop_rng(mix_seed(config.seed, 3));
    detail::train_regressor(params, exp, exp_graphs, exp_split.train,
                            exp_split.valid, config.finetune_epochs,
                            config.patience, config.batch_size, config.lr,
                            loop_rng, rep);
    return params;
  };

  if (!config.pretrain) {
    NreParams params = run_exp_only(report ? &report->exp_only : nullptr);
    if (report != nullptr)
      report->exp_only_test_mae =
          detail::mae_over(params, exp, exp_split.test, feats);
    return params;
  }

  NreParams params =
      nre_pretrain(dft, feats, config, report ? &report->pretrain : nullptr);
  if (report != nullptr) {
    for (const auto* p : params.params()) report->finetune_start_values.push_back(p->value);
  }
  Rng loop_rng(mix_seed(config.seed, 3));
  detail::train_regressor(params, exp, exp_graphs, exp_split.train,
                          exp_split.valid, config.finetune_epochs,
                          config.patience, config.batch_size, config.lr,
                          loop_rng, report ? &report->finetune : nullptr);

  if (report != nullptr) {
    report->finetuned_test_mae =
        detail::mae_over(params, exp, exp_split.test, feats);
    NreParams ablation = run_exp_only(&report->exp_only);
    report->exp_only_test_mae =
        detail::mae_over(ablation, exp, exp_split.test, feats);
  }
  return params;
}

}  // namespace retro
