//
// Project retro - Copyright 2026 The retro Authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "retro/composition.hpp"
#include "retro/elements.hpp"
#include "retro/rng.hpp"

namespace retro {

/// Per-element input feature vectors for the composition graph encoder.
/// Loaded from a literature-embedding JSON file when available, otherwise
/// generated deterministically from a seed.
struct ElementFeatureTable {
  enum class Source { file, fallback };

  Source source = Source::fallback;
  int dim = 0;
  std::map<std::string, Eigen::VectorXd> table;

  const Eigen::VectorXd& at(const std::string& symbol) const {
    auto it = table.find(symbol);
    if (it == table.end())
      throw std::runtime_error("no feature vector for element " + symbol);
    return it->second;
  }

  bool has(const std::string& symbol) const { return table.count(symbol) > 0; }
};

/// Loads element features from a JSON object {"Si": [..], "O": [..], ...}.
/// All vectors must share one dimension; unknown symbols are rejected.
inline ElementFeatureTable load_element_features(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open element feature file " + path);
  nlohmann::json j;
  in >> j;
  if (!j.is_object())
    throw std::runtime_error("element feature file must be a JSON object");

  ElementFeatureTable feats;
  feats.source = ElementFeatureTable::Source::file;
  for (const auto& [symbol, arr] : j.items()) {
    if (atomic_number(symbol) == 0)
      throw std::runtime_error("unknown element symbol in feature file: " +
                               symbol);
    if (!arr.is_array() || arr.empty())
      throw std::runtime_error("feature entry for " + symbol +
                               " is not a nonempty array");
    Eigen::VectorXd v(arr.size());
    for (std::size_t i = 0; i < arr.size(); ++i) v[i] = arr[i].get<double>();
    if (feats.dim == 0) feats.dim = static_cast<int>(v.size());
    if (v.size() != feats.dim)
      throw std::runtime_error("feature dimension mismatch for " + symbol);
    feats.table.emplace(symbol, std::move(v));
  }
  if (feats.table.empty())
    throw std::runtime_error("element feature file is empty");
  return feats;
}

/// Deterministic substitute when no feature file is supplied: per-element
/// unit vectors derived from (seed, atomic number), covering all 118
/// elements.
inline ElementFeatureTable fallback_element_features(int dim,
                                                     std::uint64_t seed) {
  if (dim < 1) throw std::invalid_argument("feature dim must be >= 1");
  ElementFeatureTable feats;
  feats.source = ElementFeatureTable::Source::fallback;
  feats.dim = dim;
  for (int z = 1; z <= kNumElements; ++z) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(z)));
    Eigen::VectorXd v(dim);
    for (int i = 0; i < dim; ++i) v[i] = uniform_real(rng, -1.0, 1.0);
    const double norm = v.norm();
    feats.table.emplace(std::string(element_symbol(z)),
                        norm > 0 ? Eigen::VectorXd(v / norm) : v);
  }
  return feats;
}

/// Fully connected graph over a material's constituent elements. Nodes are
/// ordered by ascending atomic number; edges are all ordered pairs (i, j)
/// with i != j (no self-loops).
struct CompositionGraph {
  std::vector<std::string> elements;
  Eigen::MatrixXd features;   // n x feature_dim, raw element features
  Eigen::VectorXd fractions;  // n, molar fraction per node
  std::vector<std::pair<int, int>> edges;

  int node_count() const { return static_cast<int>(elements.size()); }
  int edge_count() const { return static_cast<int>(edges.size()); }
};

inline CompositionGraph build_graph(const Composition& c,
                                    const ElementFeatureTable& feats) {
  CompositionGraph g;
  g.elements = c.elements_by_z();

  std::string missing;
  for (const auto& sym : g.elements)
    if (!feats.has(sym)) missing += missing.empty() ? sym : ", " + sym;
  if (!missing.empty())
    throw std::runtime_error("missing element features for: " + missing);

  const int n = g.node_count();
  g.features.resize(n, feats.dim);
  g.fractions.resize(n);
  for (int i = 0; i < n; ++i) {
    g.features.row(i) = feats.at(g.elements[i]).transpose();
    g.fractions[i] = c.vector[atomic_number(g.elements[i]) - 1];
  }
  g.edges.reserve(static_cast<std::size_t>(n) * (n - 1));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j) g.edges.emplace_back(i, j);
  return g;
}

}  // namespace retro
