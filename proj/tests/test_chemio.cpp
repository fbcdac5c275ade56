//
// Project retro - Copyright 2026 The retro Authors.
// SPDX-License-Identifier: Apache-2.0
//

#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "retro/composition.hpp"
#include "retro/dataset.hpp"
#include "retro/features.hpp"
#include "testutil.hpp"

using namespace retro;

TEST_CASE("parse_formula: SiO2 fractions by atomic number") {
  const Composition c = parse_formula("SiO2");
  REQUIRE(c.vector.size() == 118);
  CHECK(c.vector[13] == Catch::Approx(1.0 / 3.0));  // Si, Z=14
  CHECK(c.vector[7] == Catch::Approx(2.0 / 3.0));   // O, Z=8
  CHECK(c.vector.sum() == Catch::Approx(1.0).margin(1e-9));
  int nonzero = 0;
  for (int i = 0; i < 118; ++i) nonzero += c.vector[i] > 0 ? 1 : 0;
  CHECK(nonzero == 2);
}

TEST_CASE("parse_formula: single element") {
  const Composition c = parse_formula("O");
  CHECK(c.vector[7] == 1.0);
  CHECK(c.vector.sum() == 1.0);
  CHECK(c.amounts.size() == 1);
}

TEST_CASE("parse_formula: parenthesized groups expand") {
  const Composition c = parse_formula("Ca(OH)2");
  REQUIRE(c.amounts.size() == 3);
  CHECK(c.amounts.at("Ca") == Rational::from_int(1));
  CHECK(c.amounts.at("O") == Rational::from_int(2));
  CHECK(c.amounts.at("H") == Rational::from_int(2));
  CHECK(c.vector[19] == Catch::Approx(0.2));  // Ca
  CHECK(c.vector[7] == Catch::Approx(0.4));   // O
  CHECK(c.vector[0] == Catch::Approx(0.4));   // H
}

TEST_CASE("parse_formula: decimal stoichiometry as rationals") {
  const Composition c = parse_formula("La0.7Sr0.3MnO3");
  CHECK(c.amounts.at("La") == Rational::make(7, 10));
  CHECK(c.amounts.at("Sr") == Rational::make(3, 10));
  CHECK(c.amounts.at("Mn") == Rational::from_int(1));
  CHECK(c.amounts.at("O") == Rational::from_int(3));
  CHECK(c.vector.sum() == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("parse_formula: nested groups and brackets") {
  const Composition c = parse_formula("Pb9[Li2(P2O7)2(P4O13)2]");
  CHECK(c.amounts.at("Pb") == Rational::from_int(9));
  CHECK(c.amounts.at("Li") == Rational::from_int(2));
  CHECK(c.amounts.at("P") == Rational::from_int(12));   // 2*2 + 4*2
  CHECK(c.amounts.at("O") == Rational::from_int(40));   // 7*2 + 13*2
}

TEST_CASE("parse_formula: errors name the offending token") {
  CHECK_THROWS_AS(parse_formula("SiQ2"), ParseError);
  try {
    parse_formula("SiQ2");
  } catch (const ParseError& e) {
    CHECK(e.token == "Q");
    CHECK(std::string(e.what()).find("unknown element") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_formula("Si(O2"), ParseError);
  CHECK_THROWS_AS(parse_formula("SiO2)"), ParseError);
  CHECK_THROWS_AS(parse_formula("Si0"), ParseError);
  try {
    parse_formula("Si0");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("zero total atom count") !=
          std::string::npos);
  }
  CHECK_THROWS_AS(parse_formula(""), ParseError);
  CHECK_THROWS_AS(parse_formula("2SiO"), ParseError);
  CHECK_THROWS_AS(parse_formula("Si-O"), ParseError);
  CHECK_THROWS_AS(parse_formula("Si2."), ParseError);
  CHECK_THROWS_AS(parse_formula("()4"), ParseError);
  CHECK_THROWS_AS(parse_formula("Si0.1234567"), ParseError);
}

TEST_CASE("composition vectors ignore token order") {
  const Composition a = parse_formula("SiO2");
  const Composition b = parse_formula("O2Si");
  CHECK(a.vector == b.vector);
  CHECK(canonical_formula(a) == canonical_formula(b));
}

TEST_CASE("canonical formula reduces to smallest integers") {
  CHECK(canonicalize("Si2O4") == "O2Si");
  CHECK(canonicalize("SiO2") == "O2Si");
  CHECK(canonicalize("La0.7Sr0.3MnO3") == "La7Mn10O30Sr3");
  CHECK(canonicalize("Ca(OH)2") == "CaH2O2");
}

TEST_CASE("round-trip: canonical formulas are fixed points") {
  const char* formulas[] = {"SiO2",      "Ca(OH)2",     "La0.7Sr0.3MnO3",
                            "LiFePO4",   "Ba2Ti2O5",    "Pb9[Li2(P2O7)2]",
                            "H2O",       "C",           "Na0.5K0.5Cl",
                            "Y3Al5O12",  "(NH4)2SO4",   "Fe0.95O"};
  for (const auto* f : formulas) {
    const Composition c1 = parse_formula(f);
    const std::string canon = canonical_formula(c1);
    const Composition c2 = parse_formula(canon);
    CHECK(canonical_formula(c2) == canon);
    // Same material: identical fraction vectors.
    CHECK((c1.vector - c2.vector).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("build_graph: node and edge counts") {
  const auto feats = fallback_element_features(8, 7);
  const auto g2 = build_graph(parse_formula("SiO2"), feats);
  CHECK(g2.node_count() == 2);
  CHECK(g2.edge_count() == 2);

  const auto g1 = build_graph(parse_formula("O"), feats);
  CHECK(g1.node_count() == 1);
  CHECK(g1.edge_count() == 0);

  const auto g4 = build_graph(parse_formula("LiFePO4"), feats);
  CHECK(g4.node_count() == 4);
  CHECK(g4.edge_count() == 12);

  // Node order is ascending atomic number.
  CHECK(g4.elements == std::vector<std::string>{"Li", "O", "P", "Fe"});
}

TEST_CASE("build_graph: missing feature lists the element") {
  ElementFeatureTable feats = fallback_element_features(4, 1);
  feats.table.erase("Si");
  try {
    build_graph(parse_formula("SiO2"), feats);
    FAIL("expected an error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("Si") != std::string::npos);
  }
}

TEST_CASE("fallback features: deterministic unit vectors, all distinct") {
  const auto a = fallback_element_features(16, 42);
  const auto b = fallback_element_features(16, 42);
  REQUIRE(a.table.size() == 118);
  for (const auto& [sym, v] : a.table) {
    CHECK(v.norm() == Catch::Approx(1.0).margin(1e-6));
    CHECK(v == b.at(sym));
  }
  // All 118 vectors pairwise distinct.
  std::vector<Eigen::VectorXd> vs;
  for (const auto& [sym, v] : a.table) vs.push_back(v);
  for (std::size_t i = 0; i < vs.size(); ++i)
    for (std::size_t j = i + 1; j < vs.size(); ++j)
      CHECK((vs[i] - vs[j]).norm() > 1e-6);

  const auto c = fallback_element_features(16, 43);
  CHECK(a.at("Si") != c.at("Si"));
}

static std::string jsonl_fixture() {
  return R"({"id":"r1","target_formula":"SiO2","precursor_formulas":["SiO2"],"year":2010}
{"id":"r2","target_formula":"BaTiO3","precursor_formulas":["BaCO3","TiO2"],"year":2015}
{"id":"r3","target_formula":"LiFePO4","precursor_formulas":["Li2CO3","FePO4"],"year":2019}
{"id":"bad","target_formula":"SiO2"}
)";
}

TEST_CASE("load_recipes: valid lines parsed, invalid rejected with line") {
  testutil::TempDir dir("load");
  testutil::write_file(dir.file("r.jsonl"), jsonl_fixture());
  const auto res = load_recipes(dir.file("r.jsonl"));
  REQUIRE(res.records.size() == 3);
  REQUIRE(res.rejects.size() == 1);
  CHECK(res.rejects[0].line == 4);
  CHECK(res.rejects[0].reason.find("precursor_formulas") != std::string::npos);
  CHECK(res.records[0].id == "r1");
  CHECK(res.records[0].year == 2010);
  CHECK(res.records[1].precursor_formulas.size() == 2);
}

TEST_CASE("load_recipes: unparseable formula rejected, not fatal") {
  testutil::TempDir dir("loadbad");
  testutil::write_file(
      dir.file("r.jsonl"),
      R"({"id":"a","target_formula":"Qq2","precursor_formulas":["SiO2"]})"
      "\n"
      R"({"id":"b","target_formula":"SiO2","precursor_formulas":["SiO2"]})"
      "\n");
  const auto res = load_recipes(dir.file("r.jsonl"));
  CHECK(res.records.size() == 1);
  REQUIRE(res.rejects.size() == 1);
  CHECK(res.rejects[0].line == 1);
  CHECK(res.rejects[0].reason.find("target_formula") != std::string::npos);
}

static std::vector<RawRecipe> make_records(int n, std::uint64_t seed) {
  std::vector<RawRecipe> recs;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    RawRecipe r;
    r.id = "r" + std::to_string(i);
    r.target = parse_formula("SiO2");
    Composition p = parse_formula("SiO2");
    r.precursor_formulas = {canonical_formula(p)};
    r.precursors = {p};
    r.year = 2005 + static_cast<int>(uniform_index(rng, 15));
    recs.push_back(r);
  }
  return recs;
}

TEST_CASE("split_dataset: year thresholds") {
  std::vector<RawRecipe> recs = make_records(3, 1);
  recs[0].year = 2010;
  recs[1].year = 2015;
  recs[2].year = 2019;
  const auto s = split_dataset(recs, SplitMode::year, 0);
  REQUIRE(s.train.size() == 1);
  REQUIRE(s.valid.size() == 1);
  REQUIRE(s.test.size() == 1);
  CHECK(s.train[0].id == "r0");
  CHECK(s.valid[0].id == "r1");
  CHECK(s.test[0].id == "r2");
}

TEST_CASE("split_dataset: year mode names record with missing year") {
  std::vector<RawRecipe> recs = make_records(2, 1);
  recs[1].year.reset();
  try {
    split_dataset(recs, SplitMode::year, 0);
    FAIL("expected an error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("r1") != std::string::npos);
  }
}

TEST_CASE("split_dataset: random 80/10/10 and reproducibility") {
  const auto recs = make_records(10, 2);
  const auto a = split_dataset(recs, SplitMode::random, 7);
  CHECK(a.train.size() == 8);
  CHECK(a.valid.size() == 1);
  CHECK(a.test.size() == 1);

  const auto b = split_dataset(recs, SplitMode::random, 7);
  for (std::size_t i = 0; i < a.train.size(); ++i)
    CHECK(a.train[i].id == b.train[i].id);
  CHECK(a.valid[0].id == b.valid[0].id);
  CHECK(a.test[0].id == b.test[0].id);

  // Partition: disjoint and exhaustive.
  std::set<std::string> ids;
  for (const auto& r : a.train) ids.insert(r.id);
  for (const auto& r : a.valid) ids.insert(r.id);
  for (const auto& r : a.test) ids.insert(r.id);
  CHECK(ids.size() == recs.size());

  const auto c = split_dataset(recs, SplitMode::random, 8);
  bool same = a.train.size() == c.train.size();
  if (same)
    for (std::size_t i = 0; i < a.train.size(); ++i)
      same = same && a.train[i].id == c.train[i].id;
  CHECK_FALSE(same);
}

TEST_CASE("build_vocab_and_kb: deterministic vocabulary, labels") {
  std::vector<RawRecipe> train;
  {
    RawRecipe r;
    r.id = "t1";
    r.target = parse_formula("PbTiO3");
    r.precursors = {parse_formula("PbO"), parse_formula("Li2CO3")};
    r.precursor_formulas = {canonicalize("PbO"), canonicalize("Li2CO3")};
    train.push_back(r);
  }
  {
    RawRecipe r;
    r.id = "t2";
    r.target = parse_formula("Li2O");
    // Same compound written with a different atom order; canonicalization
    // must collapse it onto one vocabulary entry.
    r.precursors = {parse_formula("CO3Li2")};
    r.precursor_formulas = {canonicalize("CO3Li2")};
    train.push_back(r);
  }
  const auto kb = build_vocab_and_kb(train);
  const auto& vocab = kb.vocab;
  REQUIRE(vocab.size() == 2);
  CHECK(vocab.precursors[0] == "CLi2O3");
  CHECK(vocab.precursors[1] == "OPb");
  CHECK(kb.size() == 2);
  CHECK(kb.recipes[0].precursor_ids == std::vector<int>{0, 1});
  CHECK(kb.recipes[1].precursor_ids == std::vector<int>{0});

  // popcount(label) == |precursor_ids|
  for (const auto& r : kb.recipes) {
    int pop = 0;
    for (auto b : r.label) pop += b;
    CHECK(pop == static_cast<int>(r.precursor_ids.size()));
  }
}

TEST_CASE("labelize: OOV precursors recorded, recipe retained") {
  std::vector<RawRecipe> train = make_records(1, 3);
  const auto kb = build_vocab_and_kb(train);
  const auto& vocab = kb.vocab;

  RawRecipe test;
  test.id = "x";
  test.target = parse_formula("BaTiO3");
  test.precursors = {parse_formula("BaCO3")};
  test.precursor_formulas = {canonicalize("BaCO3")};
  const Recipe r = labelize(test, vocab);
  CHECK(r.precursor_ids.empty());
  REQUIRE(r.oov_precursors.size() == 1);
  CHECK(r.oov_precursors[0] == canonicalize("BaCO3"));
}

TEST_CASE("round-trip property over random generated formulas") {
  Rng rng(99);
  const char* pool[] = {"Li", "Na", "K",  "Mg", "Ca", "Sr", "Ba", "Ti",
                        "Zr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Al"};
  for (int iter = 0; iter < 200; ++iter) {
    std::string f;
    const int parts = uniform_int(rng, 1, 4);
    for (int p = 0; p < parts; ++p) {
      f += pool[uniform_index(rng, 16)];
      const int style = uniform_int(rng, 0, 2);
      if (style == 1) f += std::to_string(uniform_int(rng, 1, 12));
      if (style == 2)
        f += std::to_string(uniform_int(rng, 0, 3)) + "." +
             std::to_string(uniform_int(rng, 1, 9));
    }
    f += "O" + std::to_string(uniform_int(rng, 1, 9));
    const Composition c1 = parse_formula(f);
    const std::string canon = canonical_formula(c1);
    const Composition c2 = parse_formula(canon);
    REQUIRE(canonical_formula(c2) == canon);
    REQUIRE((c1.vector - c2.vector).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("count_duplicates reports identical (target, precursor set)") {
  auto recs = make_records(3, 5);
  CHECK(count_duplicates(recs) == 2);
  recs[2].precursor_formulas = {canonicalize("Li2CO3")};
  CHECK(count_duplicates(recs) == 1);
}
