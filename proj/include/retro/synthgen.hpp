//
// Project retro - Copyright 2026 The retro Authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "retro/composition.hpp"
#include "retro/elements.hpp"
#include "retro/nre.hpp"
#include "retro/rng.hpp"

namespace retro {

/// Controls for the synthetic corpus. The realized precursor vocabulary
/// holds two source compounds per usable element, so it has
/// 2 * min(n_elements, vocab_size / 2) entries.
struct SynthConfig {
  int n_recipes = 500;
  int n_elements = 12;
  int vocab_size = 24;
  std::uint64_t rule_seed = 7;
  double noise_rate = 0.05;
  std::pair<int, int> year_range = {2000, 2020};
  int dft_entries = 2000;
  int exp_entries = 100;
};

namespace detail {

/// Cation pool for synthetic targets. C, H, O, and N are reserved for the
/// source-compound convention and never appear as cations.
inline const std::vector<std::string>& synth_cations() {
  static const std::vector<std::string> pool = {
      "Li", "Na", "K",  "Mg", "Ca", "Sr", "Ba", "Al", "Ti", "Zr",
      "Fe", "Zn", "Cu", "Mn", "Ni", "Co", "V",  "Cr", "Ga", "Y"};
  return pool;
}

inline void check_synth_config(const SynthConfig& cfg) {
  if (cfg.n_recipes < 10)
    throw std::invalid_argument("synth: need at least 10 recipes");
  if (cfg.vocab_size < 4)
    throw std::invalid_argument("synth: need a vocabulary of at least 4");
  if (cfg.n_elements < 2 ||
      cfg.n_elements > static_cast<int>(synth_cations().size()))
    throw std::invalid_argument(
        "synth: element count must be in [2, " +
        std::to_string(synth_cations().size()) + "]");
  if (cfg.noise_rate < 0.0)
    throw std::invalid_argument("synth: negative noise rate");
  if (cfg.year_range.first > cfg.year_range.second)
    throw std::invalid_argument("synth: empty year range");
  if (cfg.dft_entries < 1 || cfg.exp_entries < 1)
    throw std::invalid_argument("synth: energy tables cannot be empty");
}

inline int synth_pool_size(const SynthConfig& cfg) {
  return std::min(cfg.n_elements, cfg.vocab_size / 2);
}

}  // namespace detail

/// The two fixed source compounds of one element: a carbonate-like and a
/// hydroxide-like formula. Both respect the convention that precursors
/// add only C, H, O, or N to the target's elements.
inline std::pair<std::string, std::string> synth_sources(
    const std::string& element) {
  return {element + "2CO3", element + "O2H2"};
}

/// Deterministic target-to-precursors template: every cation contributes
/// its carbonate-like source when the target has an even number of
/// cations, its hydroxide-like source otherwise. Canonical formulas,
/// sorted. Pure in the target's element set, so the mapping is learnable.
inline std::vector<std::string> synth_rule(const Composition& target) {
  std::vector<std::string> cations;
  for (const auto& sym : target.elements_by_z())
    if (sym != "C" && sym != "H" && sym != "O" && sym != "N")
      cations.push_back(sym);
  if (cations.empty())
    throw std::invalid_argument("synth_rule: target has no cations");
  const bool even = cations.size() % 2 == 0;
  std::vector<std::string> out;
  for (const auto& sym : cations) {
    const auto [carbonate, hydroxide] = synth_sources(sym);
    out.push_back(canonicalize(even ? carbonate : hydroxide));
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Smooth deterministic energy surface over compositions, in the spirit
/// of a formation energy per atom: a fixed per-element linear part plus a
/// bounded nonlinearity, all derived from the seed.
class SynthEnergy {
 public:
  explicit SynthEnergy(std::uint64_t rule_seed) {
    Rng rng(mix_seed(rule_seed, 0x656e6572));
    linear_.resize(kNumElements);
    phase_.resize(kNumElements);
    for (int z = 0; z < kNumElements; ++z) {
      linear_[static_cast<std::size_t>(z)] = uniform_real(rng, -3.0, -0.5);
      phase_[static_cast<std::size_t>(z)] = uniform_real(rng, 0.0, 6.0);
    }
  }

  double dft(const Composition& c) const {
    double lin = 0.0, arg = 0.0;
    for (int z = 0; z < kNumElements; ++z) {
      const double f = c.vector[z];
      if (f == 0.0) continue;
      lin += linear_[static_cast<std::size_t>(z)] * f;
      arg += phase_[static_cast<std::size_t>(z)] * f;
    }
    return lin + 0.4 * std::sin(arg);
  }

  /// The experimental surface is the DFT surface shifted by a fixed bias;
  /// sampling noise is added separately at table-generation time.
  double experimental_mean(const Composition& c) const {
    return dft(c) + kExperimentalBias;
  }

  static constexpr double kExperimentalBias = 0.15;

 private:
  std::vector<double> linear_;
  std::vector<double> phase_;
};

struct SynthPaths {
  std::string recipes;
  std::string dft;
  std::string exp;
};

namespace detail {

/// Random target over 2..4 pool cations with half-integer amounts plus a
/// matching oxygen amount. Every formula round-trips through the parser.
inline std::string synth_target_formula(Rng& rng, int pool) {
  const int m = 2 + static_cast<int>(uniform_index(
                        rng, static_cast<std::uint64_t>(std::min(3, pool - 1))));
  std::vector<int> picks(static_cast<std::size_t>(pool));
  for (int i = 0; i < pool; ++i) picks[static_cast<std::size_t>(i)] = i;
  shuffle(picks, rng);
  picks.resize(static_cast<std::size_t>(m));
  std::sort(picks.begin(), picks.end());

  std::string formula;
  double total = 0.0;
  for (int idx : picks) {
    const double amount =
        1.0 + 0.5 * static_cast<double>(uniform_index(rng, 5));  // 1.0 .. 3.0
    total += amount;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%.1f",
                  synth_cations()[static_cast<std::size_t>(idx)].c_str(),
                  amount);
    formula += buf;
  }
  char oxy[32];
  std::snprintf(oxy, sizeof(oxy), "O%.1f", total);
  formula += oxy;
  return formula;
}

}  // namespace detail

/// Writes recipes.jsonl, dft.csv, and exp.csv under out_dir. Output bytes
/// are a pure function of the config.
inline SynthPaths generate_corpus(const SynthConfig& cfg,
                                  const std::string& out_dir) {
  detail::check_synth_config(cfg);
  const int pool = detail::synth_pool_size(cfg);
  if (pool < 2)
    throw std::invalid_argument(
        "synth: config leaves fewer than two usable elements");
  std::filesystem::create_directories(out_dir);

  SynthPaths paths;
  paths.recipes = (std::filesystem::path(out_dir) / "recipes.jsonl").string();
  paths.dft = (std::filesystem::path(out_dir) / "dft.csv").string();
  paths.exp = (std::filesystem::path(out_dir) / "exp.csv").string();

  // Recipes.
  {
    Rng rng(mix_seed(cfg.rule_seed, 0x72656370));
    std::ofstream out(paths.recipes);
    if (!out) throw std::runtime_error("cannot write " + paths.recipes);
    for (int i = 0; i < cfg.n_recipes; ++i) {
      const std::string formula = detail::synth_target_formula(rng, pool);
      const Composition target = parse_formula(formula);
      const int year = uniform_int(rng, cfg.year_range.first,
                                   cfg.year_range.second);
      char id[32];
      std::snprintf(id, sizeof(id), "s%06d", i);
      nlohmann::json j{{"id", id},
                       {"target_formula", formula},
                       {"precursor_formulas", synth_rule(target)},
                       {"year", year}};
      out << j.dump() << "\n";
    }
  }

  const SynthEnergy surface(cfg.rule_seed);
  const auto random_comp = [&](Rng& rng) {
    return parse_formula(detail::synth_target_formula(rng, pool));
  };

  // DFT table: the source compounds first, then random compositions, so
  // the regressor sees the precursor formulas in distribution.
  {
    EnergyTable table;
    table.kind = EnergyKind::dft;
    Rng rng(mix_seed(cfg.rule_seed, 0x646674));
    std::vector<Composition> vocab_comps;
    for (int i = 0; i < pool; ++i) {
      const auto [a, b] = synth_sources(detail::synth_cations()[static_cast<std::size_t>(i)]);
      vocab_comps.push_back(parse_formula(a));
      vocab_comps.push_back(parse_formula(b));
    }
    for (int i = 0; i < cfg.dft_entries; ++i) {
      EnergyEntry e;
      e.comp = i < static_cast<int>(vocab_comps.size())
                   ? vocab_comps[static_cast<std::size_t>(i)]
                   : random_comp(rng);
      e.energy = surface.dft(e.comp);
      table.entries.push_back(std::move(e));
    }
    write_energy_table(paths.dft, table);
  }

  // Experimental table: same surface, fixed bias, seeded noise.
  {
    EnergyTable table;
    table.kind = EnergyKind::experimental;
    Rng rng(mix_seed(cfg.rule_seed, 0x657870));
    for (int i = 0; i < cfg.exp_entries; ++i) {
      EnergyEntry e;
      e.comp = random_comp(rng);
      e.energy = surface.experimental_mean(e.comp) + cfg.noise_rate * normal(rng);
      table.entries.push_back(std::move(e));
    }
    write_energy_table(paths.exp, table);
  }
  return paths;
}

}  // namespace retro
