//
// Project retro - Copyright 2026 The retro Authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "retro/dataset.hpp"

namespace retro {

struct ScoredSet {
  std::vector<int> ids;  // ascending vocabulary indices
  double score = 0.0;
};

/// Candidate precursor sets ordered best first: score descending, score
/// ties by lexicographic order of the sorted index tuples.
struct SetPrediction {
  std::vector<ScoredSet> sets;
};

/// Scores every subset of size 1..max_size of the top_n most probable
/// precursors and keeps the `beam` best. A set's score multiplies, in
/// ascending index order over the restricted pool, p_i for members and
/// (1 - p_j) for non-members, so the decoding is exact within the pool.
inline SetPrediction enumerate_sets(const Eigen::VectorXd& probs, int top_n,
                                    int max_size, int beam) {
  const int l = static_cast<int>(probs.size());
  if (top_n < 1 || top_n > l)
    throw std::invalid_argument("enumerate_sets: top_n outside [1, l]");
  if (max_size < 1) throw std::invalid_argument("enumerate_sets: max_size < 1");
  if (beam < 1) throw std::invalid_argument("enumerate_sets: beam < 1");

  std::vector<int> pool(static_cast<std::size_t>(l));
  for (int i = 0; i < l; ++i) pool[static_cast<std::size_t>(i)] = i;
  std::sort(pool.begin(), pool.end(), [&](int a, int b) {
    if (probs(a) != probs(b)) return probs(a) > probs(b);
    return a < b;
  });
  pool.resize(static_cast<std::size_t>(top_n));
  std::sort(pool.begin(), pool.end());

  std::vector<ScoredSet> all;
  const std::uint32_t n_masks = 1u << top_n;
  for (std::uint32_t mask = 1; mask < n_masks; ++mask) {
    const int size = __builtin_popcount(mask);
    if (size > max_size) continue;
    ScoredSet s;
    s.score = 1.0;
    for (int pos = 0; pos < top_n; ++pos) {
      const int idx = pool[static_cast<std::size_t>(pos)];
      if (mask & (1u << pos)) {
        s.score *= probs(idx);
        s.ids.push_back(idx);
      } else {
        s.score *= 1.0 - probs(idx);
      }
    }
    all.push_back(std::move(s));
  }
  std::sort(all.begin(), all.end(), [](const ScoredSet& a, const ScoredSet& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.ids < b.ids;
  });
  if (static_cast<int>(all.size()) > beam)
    all.resize(static_cast<std::size_t>(beam));
  SetPrediction out;
  out.sets = std::move(all);
  return out;
}

/// True iff the gold id set appears among the first K candidates. The
/// caller screens out-of-vocabulary gold sets before calling (they can
/// never match and are tallied separately).
inline bool exact_match_at_k(const SetPrediction& preds,
                             const std::vector<int>& gold_sorted, int k) {
  const int limit = std::min<int>(k, static_cast<int>(preds.sets.size()));
  for (int i = 0; i < limit; ++i)
    if (preds.sets[static_cast<std::size_t>(i)].ids == gold_sorted) return true;
  return false;
}

/// Macro recall averages per-class recall over classes with at least one
/// positive; micro recall pools every positive. Predictions threshold at
/// `threshold`.
inline std::pair<double, double> recalls(const Eigen::MatrixXd& probs,
                                         const Eigen::MatrixXd& targets,
                                         double threshold = 0.5) {
  if (probs.rows() != targets.rows() || probs.cols() != targets.cols())
    throw std::invalid_argument("recalls: shape mismatch");
  double macro_sum = 0.0;
  int macro_classes = 0;
  long total_tp = 0, total_pos = 0;
  for (Eigen::Index j = 0; j < probs.cols(); ++j) {
    long tp = 0, pos = 0;
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
      if (targets(i, j) != 0.0) {
        ++pos;
        if (probs(i, j) >= threshold) ++tp;
      }
    }
    if (pos > 0) {
      macro_sum += static_cast<double>(tp) / static_cast<double>(pos);
      ++macro_classes;
      total_tp += tp;
      total_pos += pos;
    }
  }
  const double macro = macro_classes > 0 ? macro_sum / macro_classes : 0.0;
  const double micro =
      total_pos > 0 ? static_cast<double>(total_tp) / static_cast<double>(total_pos)
                    : 0.0;
  return {macro, micro};
}

/// Canonical-formula precursor set of a recipe, vocabulary entries and
/// out-of-vocabulary formulas combined, sorted.
inline std::vector<std::string> precursor_set_key(
    const Recipe& r, const PrecursorVocabulary& vocab) {
  std::vector<std::string> key;
  for (int id : r.precursor_ids)
    key.push_back(vocab.precursors[static_cast<std::size_t>(id)]);
  key.insert(key.end(), r.oov_precursors.begin(), r.oov_precursors.end());
  std::sort(key.begin(), key.end());
  return key;
}

using SetRegistry = std::set<std::vector<std::string>>;

inline SetRegistry build_set_registry(const std::vector<Recipe>& train,
                                      const PrecursorVocabulary& vocab) {
  SetRegistry reg;
  for (const auto& r : train) reg.insert(precursor_set_key(r, vocab));
  return reg;
}

enum class CaseMode {
  exact_set,        // known case means the whole set appears in training
  subset_relation,  // known case means the set is contained in a training set
};

struct CaseSplit {
  std::vector<int> subset_case;  // indices into the test list
  std::vector<int> new_case;
};

/// Splits test recipes into those whose precursor set is already known
/// from training and those introducing a new set.
inline CaseSplit case_split(const std::vector<Recipe>& test,
                            const SetRegistry& registry,
                            const PrecursorVocabulary& vocab,
                            CaseMode mode = CaseMode::exact_set) {
  CaseSplit out;
  for (int i = 0; i < static_cast<int>(test.size()); ++i) {
    const auto key = precursor_set_key(test[static_cast<std::size_t>(i)], vocab);
    bool known = false;
    if (mode == CaseMode::exact_set) {
      known = registry.count(key) > 0;
    } else {
      for (const auto& train_set : registry) {
        known = std::includes(train_set.begin(), train_set.end(), key.begin(),
                              key.end());
        if (known) break;
      }
    }
    (known ? out.subset_case : out.new_case).push_back(i);
  }
  return out;
}

struct DecodeConfig {
  int top_n = 10;
  int max_size = 6;
  int beam = 10;
};

struct CaseMetrics {
  int count = 0;
  std::map<int, double> top_k_acc;  // K in {1,3,5,10}
};

struct EvalReport {
  int count = 0;
  std::map<int, double> top_k_acc;
  double macro_recall = 0.0;
  double micro_recall = 0.0;
  CaseMetrics subset_case;
  CaseMetrics new_case;
  int oov_miss_count = 0;
};

/// Scores one batch of per-recipe probability vectors against gold sets.
/// Gold sets containing out-of-vocabulary precursors count as misses for
/// every K and are tallied in oov_miss_count.
inline EvalReport evaluate_batch(const Eigen::MatrixXd& probs,
                                 const std::vector<Recipe>& recipes,
                                 const PrecursorVocabulary& vocab,
                                 const SetRegistry& registry,
                                 const DecodeConfig& decode = {},
                                 CaseMode mode = CaseMode::exact_set) {
  if (probs.rows() != static_cast<Eigen::Index>(recipes.size()))
    throw std::invalid_argument("evaluate_batch: row count mismatch");
  const std::vector<int> ks = {1, 3, 5, 10};
  EvalReport report;
  report.count = static_cast<int>(recipes.size());

  const int l = static_cast<int>(probs.cols());
  const DecodeConfig dec{std::min(decode.top_n, l), decode.max_size,
                         decode.beam};
  std::vector<std::map<int, int>> hits(recipes.size());
  for (std::size_t i = 0; i < recipes.size(); ++i) {
    const auto& r = recipes[i];
    if (r.has_oov()) {
      ++report.oov_miss_count;
      continue;  // all K miss; hits stay zero
    }
    const auto pred = enumerate_sets(probs.row(static_cast<Eigen::Index>(i)),
                                     dec.top_n, dec.max_size, dec.beam);
    std::vector<int> gold = r.precursor_ids;
    std::sort(gold.begin(), gold.end());
    for (int k : ks) hits[i][k] = exact_match_at_k(pred, gold, k) ? 1 : 0;
  }

  const auto fill = [&](const std::vector<int>& subset, CaseMetrics* metrics) {
    metrics->count = static_cast<int>(subset.size());
    for (int k : ks) {
      int hit = 0;
      for (int i : subset) hit += hits[static_cast<std::size_t>(i)][k];
      metrics->top_k_acc[k] =
          subset.empty() ? 0.0
                         : static_cast<double>(hit) /
                               static_cast<double>(subset.size());
    }
  };

  std::vector<int> everyone(recipes.size());
  std::iota(everyone.begin(), everyone.end(), 0);
  CaseMetrics overall;
  fill(everyone, &overall);
  report.top_k_acc = overall.top_k_acc;

  const auto split = case_split(recipes, registry, vocab, mode);
  fill(split.subset_case, &report.subset_case);
  fill(split.new_case, &report.new_case);

  Eigen::MatrixXd targets(probs.rows(), probs.cols());
  for (std::size_t i = 0; i < recipes.size(); ++i)
    for (int j = 0; j < l; ++j)
      targets(static_cast<Eigen::Index>(i), j) =
          recipes[i].label[static_cast<std::size_t>(j)] ? 1.0 : 0.0;
  const auto [macro, micro] = recalls(probs, targets);
  report.macro_recall = macro;
  report.micro_recall = micro;
  return report;
}

}  // namespace retro
