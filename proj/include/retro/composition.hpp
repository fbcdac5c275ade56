//
// Project retro - Copyright 2026 The retro Authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cctype>
#include <cstdint>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "retro/elements.hpp"

namespace retro {

/// Error raised while parsing a chemical formula. Carries the offending
/// token and its position in the input.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& msg, const std::string& formula,
             std::size_t pos, const std::string& token = "")
      : std::runtime_error(msg + " in \"" + formula + "\" at position " +
                           std::to_string(pos) +
                           (token.empty() ? "" : " (token \"" + token + "\")")),
        position(pos),
        token(token) {}

  std::size_t position;
  std::string token;
};

/// Exact stoichiometric count. Always stored reduced with den > 0.
/// Parsed counts are capped at denominator 10^6; derived totals may grow
/// past that but overflow is checked.
struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  static Rational make(std::int64_t n, std::int64_t d) {
    if (d == 0) throw std::invalid_argument("rational with zero denominator");
    if (d < 0) {
      n = -n;
      d = -d;
    }
    const std::int64_t g = std::gcd(n < 0 ? -n : n, d);
    return g > 0 ? Rational{n / g, d / g} : Rational{0, 1};
  }

  static Rational from_int(std::int64_t n) { return Rational{n, 1}; }

  friend Rational operator+(const Rational& a, const Rational& b) {
    return combine(a, b, /*add=*/true);
  }
  friend Rational operator*(const Rational& a, const Rational& b) {
    const __int128 n = static_cast<__int128>(a.num) * b.num;
    const __int128 d = static_cast<__int128>(a.den) * b.den;
    return reduce128(n, d);
  }
  friend bool operator==(const Rational& a, const Rational& b) {
    return a.num == b.num && a.den == b.den;
  }

  double to_double() const {
    return static_cast<double>(num) / static_cast<double>(den);
  }

 private:
  static Rational combine(const Rational& a, const Rational& b, bool add) {
    const __int128 n = static_cast<__int128>(a.num) * b.den +
                       (add ? 1 : -1) * static_cast<__int128>(b.num) * a.den;
    const __int128 d = static_cast<__int128>(a.den) * b.den;
    return reduce128(n, d);
  }

  static Rational reduce128(__int128 n, __int128 d) {
    const __int128 limit = static_cast<__int128>(4) * 1000000000000000000LL;
    __int128 an = n < 0 ? -n : n;
    __int128 g = gcd128(an, d);
    if (g > 1) {
      n /= g;
      d /= g;
      an = n < 0 ? -n : n;
    }
    if (an > limit || d > limit)
      throw std::overflow_error("stoichiometric count overflow");
    return Rational{static_cast<std::int64_t>(n), static_cast<std::int64_t>(d)};
  }

  static __int128 gcd128(__int128 a, __int128 b) {
    while (b != 0) {
      const __int128 t = a % b;
      a = b;
      b = t;
    }
    return a < 0 ? -a : a;
  }
};

/// A material described by its chemical formula: exact per-element counts
/// plus the dense molar-fraction vector over all 118 elements (index =
/// atomic number - 1, fractions sum to 1).
struct Composition {
  std::string formula;
  std::map<std::string, Rational> amounts;
  Eigen::VectorXd vector;

  /// Element symbols in ascending atomic number; this is the node order of
  /// the composition graph.
  std::vector<std::string> elements_by_z() const {
    std::vector<std::string> out;
    out.reserve(amounts.size());
    for (int z = 1; z <= kNumElements; ++z)
      if (vector[z - 1] > 0.0) out.emplace_back(element_symbol(z));
    return out;
  }
};

namespace detail {

/// Maximum denominator accepted for a parsed count.
inline constexpr std::int64_t kMaxCountDenominator = 1000000;

class FormulaParser {
 public:
  explicit FormulaParser(const std::string& formula) : formula_(formula) {}

  std::map<std::string, Rational> parse() {
    std::map<std::string, Rational> amounts;
    if (formula_.empty()) fail("empty formula", "");
    parse_sequence(amounts, /*depth=*/0);
    if (pos_ != formula_.size())
      fail("unbalanced parentheses", std::string(1, formula_[pos_]));
    // Zero counts are dropped (doping endpoints such as "Sr0" in a series);
    // a formula with no atoms at all is an error.
    for (auto it = amounts.begin(); it != amounts.end();)
      it = it->second.num == 0 ? amounts.erase(it) : std::next(it);
    if (amounts.empty()) fail("zero total atom count", formula_);
    return amounts;
  }

 private:
  char peek() const { return pos_ < formula_.size() ? formula_[pos_] : '\0'; }

  void skip_spaces() {
    while (pos_ < formula_.size() &&
           std::isspace(static_cast<unsigned char>(formula_[pos_])))
      ++pos_;
  }

  [[noreturn]] void fail(const std::string& msg, const std::string& token) {
    throw ParseError(msg, formula_, pos_, token);
  }

  static bool closes(char open, char close) {
    return (open == '(' && close == ')') || (open == '[' && close == ']');
  }

  void parse_sequence(std::map<std::string, Rational>& amounts, int depth) {
    bool saw_unit = false;
    while (true) {
      skip_spaces();
      const char c = peek();
      if (c == '\0' || c == ')' || c == ']') break;
      if (c == '(' || c == '[') {
        const std::size_t open_pos = pos_;
        ++pos_;
        std::map<std::string, Rational> group;
        parse_sequence(group, depth + 1);
        skip_spaces();
        if (!closes(c, peek())) {
          pos_ = open_pos;
          fail("unbalanced parentheses", std::string(1, c));
        }
        ++pos_;
        const Rational count = parse_count();
        for (const auto& [sym, amt] : group) add(amounts, sym, amt * count);
        saw_unit = true;
      } else if (std::isupper(static_cast<unsigned char>(c))) {
        const std::string symbol = parse_symbol();
        const Rational count = parse_count();
        add(amounts, symbol, count);
        saw_unit = true;
      } else {
        fail("unexpected character", std::string(1, c));
      }
    }
    if (!saw_unit) {
      if (depth > 0) fail("empty group", "");
      fail("empty formula", "");
    }
  }

  std::string parse_symbol() {
    const std::size_t start = pos_;
    std::string symbol(1, formula_[pos_++]);
    if (pos_ < formula_.size() &&
        std::islower(static_cast<unsigned char>(formula_[pos_])))
      symbol += formula_[pos_++];
    if (atomic_number(symbol) == 0) {
      pos_ = start;
      fail("unknown element symbol", symbol);
    }
    return symbol;
  }

  /// Count following an element or group: integer or decimal; absent = 1.
  Rational parse_count() {
    skip_spaces();
    if (!std::isdigit(static_cast<unsigned char>(peek())))
      return Rational::from_int(1);
    const std::size_t start = pos_;
    std::int64_t integral = 0;
    while (std::isdigit(static_cast<unsigned char>(peek()))) {
      integral = integral * 10 + (formula_[pos_++] - '0');
      if (integral > kMaxCountDenominator)
        fail("count too large", formula_.substr(start, pos_ - start));
    }
    if (peek() != '.') return Rational::from_int(integral);
    ++pos_;
    std::int64_t frac = 0;
    std::int64_t scale = 1;
    if (!std::isdigit(static_cast<unsigned char>(peek())))
      fail("malformed count", formula_.substr(start, pos_ - start + 1));
    while (std::isdigit(static_cast<unsigned char>(peek()))) {
      frac = frac * 10 + (formula_[pos_++] - '0');
      scale *= 10;
      if (scale > kMaxCountDenominator)
        fail("count exceeds 6 decimal places",
             formula_.substr(start, pos_ - start));
    }
    return Rational::make(integral * scale + frac, scale);
  }

  static void add(std::map<std::string, Rational>& amounts,
                  const std::string& symbol, const Rational& amt) {
    auto [it, inserted] = amounts.emplace(symbol, amt);
    if (!inserted) it->second = it->second + amt;
  }

  const std::string& formula_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Parses a chemical formula into exact amounts and the normalized
/// fraction vector. Accepts element symbols, integer or decimal counts,
/// and nested (), [] groups with multipliers, e.g. "Ca(OH)2",
/// "La0.7Sr0.3MnO3", "Pb9[Li2(P2O7)2(P4O13)2]".
inline Composition parse_formula(const std::string& formula) {
  detail::FormulaParser parser(formula);
  Composition c;
  c.formula = formula;
  c.amounts = parser.parse();

  Rational total = Rational::from_int(0);
  for (const auto& [sym, amt] : c.amounts) total = total + amt;

  c.vector = Eigen::VectorXd::Zero(kNumElements);
  for (const auto& [sym, amt] : c.amounts) {
    const int z = atomic_number(sym);
    c.vector[z - 1] = amt.to_double() / total.to_double();
  }
  return c;
}

/// Canonical identity string: element symbols in lexicographic order with
/// the smallest integer counts ("O2Si" and "SiO2" both map to "O2Si").
/// Counts of 1 are omitted.
inline std::string canonical_formula(const Composition& c) {
  std::int64_t lcm = 1;
  for (const auto& [sym, amt] : c.amounts) {
    lcm = std::lcm(lcm, amt.den);
    if (lcm > 1000000000000LL)
      throw std::overflow_error("cannot canonicalize: denominators too large");
  }
  std::int64_t gcd = 0;
  std::vector<std::pair<std::string, std::int64_t>> counts;
  counts.reserve(c.amounts.size());
  for (const auto& [sym, amt] : c.amounts) {
    const std::int64_t n = amt.num * (lcm / amt.den);
    counts.emplace_back(sym, n);
    gcd = std::gcd(gcd, n);
  }
  std::ostringstream out;
  for (const auto& [sym, n] : counts) {
    out << sym;
    if (n != gcd) out << n / gcd;
  }
  return out.str();
}

/// Convenience: canonical identity of a formula string.
inline std::string canonicalize(const std::string& formula) {
  return canonical_formula(parse_formula(formula));
}

}  // namespace retro
