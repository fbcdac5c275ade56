//
// Project retro - Copyright 2026 The retro Authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "retro/composition.hpp"
#include "retro/rng.hpp"

namespace retro {

/// One ingested synthesis record, before labelization against a vocabulary.
struct RawRecipe {
  std::string id;
  Composition target;
  std::vector<std::string> precursor_formulas;  // canonical
  std::vector<Composition> precursors;          // aligned with formulas
  std::optional<int> year;
};

struct RejectedLine {
  int line = 0;
  std::string reason;
};

struct LoadResult {
  std::vector<RawRecipe> records;
  std::vector<RejectedLine> rejects;
};

/// Reads a JSON-lines recipe file. Each line must carry
/// {id, target_formula, precursor_formulas (nonempty), year?}.
/// Malformed lines land in the reject report instead of being dropped.
inline LoadResult load_recipes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open recipe file " + path);

  LoadResult out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto reject = [&](const std::string& reason) {
      out.rejects.push_back({lineno, reason});
    };
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      reject("invalid JSON");
      continue;
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string()) {
      reject("missing or non-string field: id");
      continue;
    }
    if (!j.contains("target_formula") || !j["target_formula"].is_string()) {
      reject("missing or non-string field: target_formula");
      continue;
    }
    if (!j.contains("precursor_formulas") ||
        !j["precursor_formulas"].is_array() ||
        j["precursor_formulas"].empty()) {
      reject("missing or empty field: precursor_formulas");
      continue;
    }
    RawRecipe r;
    r.id = j["id"].get<std::string>();
    if (j.contains("year")) {
      if (!j["year"].is_number_integer()) {
        reject("field year is not an integer");
        continue;
      }
      r.year = j["year"].get<int>();
    }
    try {
      r.target = parse_formula(j["target_formula"].get<std::string>());
    } catch (const std::exception& e) {
      reject(std::string("target_formula: ") + e.what());
      continue;
    }
    bool ok = true;
    for (const auto& pf : j["precursor_formulas"]) {
      if (!pf.is_string()) {
        reject("precursor_formulas contains a non-string entry");
        ok = false;
        break;
      }
      try {
        Composition c = parse_formula(pf.get<std::string>());
        r.precursor_formulas.push_back(canonical_formula(c));
        r.precursors.push_back(std::move(c));
      } catch (const std::exception& e) {
        reject(std::string("precursor_formulas: ") + e.what());
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    out.records.push_back(std::move(r));
  }
  return out;
}

inline void write_reject_report(const std::vector<RejectedLine>& rejects,
                                const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write reject report " + path);
  for (const auto& r : rejects) {
    nlohmann::json j{{"line", r.line}, {"reason", r.reason}};
    out << j.dump() << "\n";
  }
}

enum class SplitMode { random, year };

struct Split {
  std::vector<RawRecipe> train, valid, test;
};

/// Random mode: seeded permutation then 80/10/10 slicing. Year mode: train
/// up to 2014, validation 2015-2016, test 2017 onward.
inline Split split_dataset(const std::vector<RawRecipe>& records,
                           SplitMode mode, std::uint64_t seed) {
  Split split;
  if (mode == SplitMode::year) {
    for (const auto& r : records) {
      if (!r.year)
        throw std::runtime_error("year split requires a year on every record; "
                                 "missing on record " +
                                 r.id);
      if (*r.year <= 2014)
        split.train.push_back(r);
      else if (*r.year <= 2016)
        split.valid.push_back(r);
      else
        split.test.push_back(r);
    }
    return split;
  }
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0x5114));
  shuffle(order, rng);
  const std::size_t n = records.size();
  const std::size_t n_train = n * 8 / 10;
  const std::size_t n_valid = n / 10;
  for (std::size_t i = 0; i < n; ++i) {
    const RawRecipe& r = records[order[i]];
    if (i < n_train)
      split.train.push_back(r);
    else if (i < n_train + n_valid)
      split.valid.push_back(r);
    else
      split.test.push_back(r);
  }
  return split;
}

/// Ordered list of the l known precursors; order is lexicographic on the
/// canonical formula, so vocabularies are deterministic.
struct PrecursorVocabulary {
  std::vector<std::string> precursors;
  std::map<std::string, int> index;

  int size() const { return static_cast<int>(precursors.size()); }

  std::optional<int> find(const std::string& canonical) const {
    auto it = index.find(canonical);
    if (it == index.end()) return std::nullopt;
    return it->second;
  }
};

/// A labelized recipe: target plus the binary precursor vector over the
/// vocabulary. Precursors absent from the vocabulary are kept in
/// oov_precursors rather than silently dropped.
struct Recipe {
  std::string id;
  Composition target;
  std::vector<int> precursor_ids;       // sorted, unique
  std::vector<std::uint8_t> label;      // length l, label[i]=1 iff i in ids
  std::optional<int> year;
  std::vector<std::string> oov_precursors;

  bool has_oov() const { return !oov_precursors.empty(); }
};

inline Recipe labelize(const RawRecipe& raw, const PrecursorVocabulary& vocab) {
  Recipe r;
  r.id = raw.id;
  r.target = raw.target;
  r.year = raw.year;
  r.label.assign(vocab.size(), 0);
  std::set<int> ids;
  for (const auto& canonical : raw.precursor_formulas) {
    if (auto idx = vocab.find(canonical))
      ids.insert(*idx);
    else
      r.oov_precursors.push_back(canonical);
  }
  r.precursor_ids.assign(ids.begin(), ids.end());
  for (int i : r.precursor_ids) r.label[i] = 1;
  return r;
}

/// Immutable store of training recipes; retrievers draw their reference
/// materials from here. Never contains validation or test recipes.
struct KnowledgeBase {
  std::vector<Recipe> recipes;
  PrecursorVocabulary vocab;

  int size() const { return static_cast<int>(recipes.size()); }
};

/// Builds the vocabulary from the distinct canonical precursor formulas of
/// the training records and labelizes them into the knowledge base.
inline KnowledgeBase build_vocab_and_kb(const std::vector<RawRecipe>& train) {
  if (train.empty())
    throw std::runtime_error("cannot build a vocabulary from an empty "
                             "training set");
  std::set<std::string> distinct;
  for (const auto& r : train)
    distinct.insert(r.precursor_formulas.begin(), r.precursor_formulas.end());

  KnowledgeBase kb;
  kb.vocab.precursors.assign(distinct.begin(), distinct.end());
  for (int i = 0; i < kb.vocab.size(); ++i)
    kb.vocab.index.emplace(kb.vocab.precursors[i], i);
  kb.recipes.reserve(train.size());
  for (const auto& r : train) kb.recipes.push_back(labelize(r, kb.vocab));
  return kb;
}

struct IngestStats {
  int loaded = 0;
  int rejected = 0;
  int duplicate_recipes = 0;  // identical (target, precursor set) pairs
  int oov_valid = 0;
  int oov_test = 0;
};

inline int count_duplicates(const std::vector<RawRecipe>& records) {
  std::map<std::string, int> seen;
  for (const auto& r : records) {
    std::string key = canonical_formula(r.target);
    std::vector<std::string> ps = r.precursor_formulas;
    std::sort(ps.begin(), ps.end());
    for (const auto& p : ps) key += "|" + p;
    ++seen[key];
  }
  int dup = 0;
  for (const auto& [key, n] : seen) dup += n - 1;
  return dup;
}

}  // namespace retro
