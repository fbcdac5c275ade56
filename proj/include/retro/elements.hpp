//
// Project retro - Copyright 2026 The retro Authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <array>
#include <map>
#include <string>
#include <string_view>

namespace retro {

/// Number of chemical elements; composition vectors have this length,
/// indexed by atomic number - 1.
inline constexpr int kNumElements = 118;

inline constexpr std::array<std::string_view, kNumElements> kElementSymbols = {
    "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne",  //
    "Na", "Mg", "Al", "Si", "P",  "S",  "Cl", "Ar", "K",  "Ca",  //
    "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",  //
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y",  "Zr",  //
    "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",  //
    "Sb", "Te", "I",  "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",  //
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb",  //
    "Lu", "Hf", "Ta", "W",  "Re", "Os", "Ir", "Pt", "Au", "Hg",  //
    "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",  //
    "Pa", "U",  "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm",  //
    "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds",  //
    "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og"};

/// Atomic number for a symbol (1-based), or 0 if the symbol is unknown.
inline int atomic_number(std::string_view symbol) {
  static const std::map<std::string, int, std::less<>> lookup = [] {
    std::map<std::string, int, std::less<>> m;
    for (int z = 1; z <= kNumElements; ++z)
      m.emplace(std::string(kElementSymbols[z - 1]), z);
    return m;
  }();
  auto it = lookup.find(symbol);
  return it == lookup.end() ? 0 : it->second;
}

/// Symbol for an atomic number in [1, 118].
inline std::string_view element_symbol(int z) { return kElementSymbols[z - 1]; }

}  // namespace retro
