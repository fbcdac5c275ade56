//
// Project retro - Copyright 2026 The retro Authors.
// SPDX-License-Identifier: Apache-2.0
//

#include <cmath>
#include <numeric>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "gradcheck.hpp"
#include "retro/composition.hpp"
#include "retro/dataset.hpp"
#include "retro/mpc.hpp"

using retro::Matrix;
using retro::MpcParams;
using retro::Recipe;

namespace {

Recipe make_recipe(const std::string& id, const std::string& formula,
                   std::vector<int> precursor_ids, int vocab_size) {
  Recipe r;
  r.id = id;
  r.target = retro::parse_formula(formula);
  r.precursor_ids = std::move(precursor_ids);
  r.label.assign(static_cast<std::size_t>(vocab_size), 0);
  for (int i : r.precursor_ids) r.label[static_cast<std::size_t>(i)] = 1;
  return r;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// Corpus where the precursor set is a fixed function of the target: one
/// distinct base formula per pair of label slots.
std::vector<Recipe> toy_corpus(int n, int vocab_size) {
  const std::vector<std::string> bases = {"Li2O",  "Na2O",  "K2O",  "MgO",
                                          "CaO",   "SrO",   "BaO",  "TiO2",
                                          "ZrO2",  "HfO2"};
  std::vector<Recipe> out;
  for (int i = 0; i < n; ++i) {
    const int b = i % static_cast<int>(bases.size());
    out.push_back(make_recipe("r" + std::to_string(i), bases[b],
                              {b % vocab_size, (b * 2 + 1) % vocab_size},
                              vocab_size));
  }
  return out;
}

}  // namespace

TEST_CASE("perturb_labels endpoints and monotonicity") {
  std::vector<std::uint8_t> y = {1, 0, 1, 1, 0, 1};
  retro::Rng rng(1);
  CHECK(retro::perturb_labels(y, 0.0, rng) == y);
  CHECK(retro::perturb_labels(y, 1.0, rng) ==
        std::vector<std::uint8_t>{0, 0, 0, 0, 0, 0});
  for (int trial = 0; trial < 200; ++trial) {
    auto yt = retro::perturb_labels(y, 0.5, rng);
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(yt[i] <= y[i]);
  }
  CHECK_THROWS_AS(retro::perturb_labels(y, 1.5, rng), std::invalid_argument);
}

TEST_CASE("perturb_labels survival count is binomial") {
  std::vector<std::uint8_t> y(1000, 1);
  // 3 sigma of Binomial(1000, .5) is about 47.4.
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    retro::Rng rng(seed);
    const auto yt = retro::perturb_labels(y, 0.5, rng);
    const int survivors = std::accumulate(yt.begin(), yt.end(), 0);
    CHECK(std::abs(survivors - 500) <= 48);
  }
}

TEST_CASE("all masked sample falls back to the raw representation") {
  retro::Rng rng(2);
  auto params = MpcParams::make(5, 8, rng);
  const Eigen::VectorXd x = retro::parse_formula("BaTiO3").vector;
  const std::vector<std::uint8_t> none(5, 0);
  const Eigen::VectorXd probs = retro::mpc_forward(x, none, params);

  const Eigen::VectorXd m = params.compose.forward(x.transpose()).row(0);
  for (int i = 0; i < 5; ++i) {
    const double want = sigmoid(m.dot(params.embed.value.row(i)));
    CHECK(probs(i) == Catch::Approx(want).epsilon(1e-12));
    CHECK(probs(i) > 0.0);
    CHECK(probs(i) < 1.0);
  }
}

TEST_CASE("single unmasked precursor bypasses attention scores") {
  retro::Rng rng(3);
  auto params = MpcParams::make(6, 8, rng);
  const Eigen::VectorXd x = retro::parse_formula("LiCoO2").vector;
  std::vector<std::uint8_t> one(6, 0);
  one[3] = 1;
  const Eigen::VectorXd probs = retro::mpc_forward(x, one, params);

  // Expected context is the value projection of embedding row 3.
  const Eigen::RowVectorXd s = params.embed.value.row(3) * params.wv.w.value;
  for (int i = 0; i < 6; ++i)
    CHECK(probs(i) ==
          Catch::Approx(sigmoid(s.dot(params.embed.value.row(i)))).epsilon(1e-12));

  // Query and key projections cannot matter with a single key.
  auto tweaked = params;
  tweaked.wq.w.value.array() += 1.0;
  tweaked.wk.w.value.array() -= 0.5;
  const Eigen::VectorXd probs2 = retro::mpc_forward(x, one, tweaked);
  CHECK((probs - probs2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mpc gradients match finite differences") {
  retro::Rng rng(4);
  auto params = MpcParams::make(4, 8, rng);
  Matrix x(3, retro::kNumElements);
  x.row(0) = retro::parse_formula("SiO2").vector.transpose();
  x.row(1) = retro::parse_formula("BaTiO3").vector.transpose();
  x.row(2) = retro::parse_formula("LiFePO4").vector.transpose();
  const std::vector<std::vector<std::uint8_t>> masks = {
      {1, 0, 1, 0}, {0, 0, 0, 0}, {0, 1, 1, 1}};
  Matrix targets(3, 4);
  targets << 1, 0, 1, 0, 1, 1, 0, 0, 0, 1, 1, 1;
  auto res = testutil::check_gradients(params.params(), [&](retro::Tape& t) {
    return t.bce_with_logits_mean(
        retro::mpc_logits_on_tape(t, x, masks, params), targets);
  });
  CHECK(res.max_rel_err <= 1e-3);
}

TEST_CASE("training loss decreases on a small corpus") {
  auto corpus = toy_corpus(20, 6);
  retro::MpcTrainConfig config;
  config.d_prime = 16;
  config.epochs = 200;
  config.patience = 200;
  config.lr = 5e-3;
  config.seed = 7;
  retro::MpcTrainReport report;
  retro::train_mpc(corpus, {}, config, &report);
  REQUIRE(report.train_loss.size() >= 2);
  CHECK(report.train_loss.back() <= 0.5 * report.train_loss.front());
}

TEST_CASE("training is deterministic per seed") {
  auto corpus = toy_corpus(12, 6);
  retro::MpcTrainConfig config;
  config.d_prime = 8;
  config.epochs = 25;
  config.patience = 25;
  config.lr = 1e-3;
  config.seed = 11;
  retro::MpcTrainReport a, b;
  auto pa = retro::train_mpc(corpus, {}, config, &a);
  auto pb = retro::train_mpc(corpus, {}, config, &b);
  REQUIRE(a.train_loss.size() == b.train_loss.size());
  CHECK(a.train_loss.back() == b.train_loss.back());
  CHECK(pa.embed.value == pb.embed.value);
  config.seed = 12;
  retro::MpcTrainReport c;
  retro::train_mpc(corpus, {}, config, &c);
  CHECK(a.train_loss.back() != c.train_loss.back());
}

TEST_CASE("unmasked deterministic corpus is reconstructed") {
  auto corpus = toy_corpus(20, 6);
  retro::MpcTrainConfig config;
  config.d_prime = 32;
  config.epochs = 400;
  config.patience = 400;
  config.lr = 5e-3;
  config.p_mask = 0.0;
  config.seed = 3;
  auto params = retro::train_mpc(corpus, {}, config);
  int correct = 0, total = 0;
  for (const auto& r : corpus) {
    const auto probs = retro::mpc_forward(r.target.vector, r.label, params);
    for (int i = 0; i < 6; ++i) {
      const bool on = probs(i) >= 0.5;
      correct += on == (r.label[static_cast<std::size_t>(i)] != 0);
      ++total;
    }
  }
  CHECK(static_cast<double>(correct) / total >= 0.95);
}

TEST_CASE("index rows are unit length") {
  retro::Rng rng(5);
  std::vector<retro::RawRecipe> raws;
  for (const auto* f : {"SiO2", "BaTiO3", "LiFePO4", "MgO", "CaTiO3"}) {
    retro::RawRecipe r;
    r.id = f;
    r.target = retro::parse_formula(f);
    r.precursor_formulas = {"Li2CO3"};
    r.precursors = {retro::parse_formula("Li2CO3")};
    raws.push_back(r);
  }
  auto kb = retro::build_vocab_and_kb(raws);
  auto params = MpcParams::make(1, 8, rng);
  auto index = retro::build_mpc_index(kb, params);
  REQUIRE(index.size() == 5);
  for (int i = 0; i < 5; ++i)
    CHECK(std::abs(index.reps.row(i).norm() - 1.0) <= 1e-6);
}

namespace {

/// Exhaustive oracle mirroring the retrieval contract with independent code.
std::vector<int> brute_force(const Eigen::VectorXd& query_rep,
                             const Eigen::VectorXd& target_comp,
                             const retro::MpcIndex& index, int k,
                             std::optional<int> exclude) {
  Eigen::VectorXd q = query_rep;
  if (q.norm() > 0) q.normalize();
  std::vector<std::pair<double, int>> scored;
  for (int r = 0; r < index.size(); ++r) {
    if (exclude && index.ids[r] == *exclude) continue;
    if (exclude && index.comps.row(r).transpose() == target_comp) continue;
    scored.emplace_back(q.dot(index.reps.row(r)), index.ids[r]);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<int> out;
  for (int i = 0; i < k && i < static_cast<int>(scored.size()); ++i)
    out.push_back(scored[i].second);
  return out;
}

}  // namespace

TEST_CASE("retrieval matches the exhaustive oracle") {
  retro::Rng rng(6);
  // Duplicated compositions force exact similarity ties.
  std::vector<std::string> formulas = {"SiO2",   "BaTiO3", "LiFePO4", "MgO",
                                       "CaTiO3", "SiO2",   "MgO",     "NaCl",
                                       "KCl",    "Al2O3"};
  std::vector<retro::RawRecipe> raws;
  for (std::size_t i = 0; i < formulas.size(); ++i) {
    retro::RawRecipe r;
    r.id = "r" + std::to_string(i);
    r.target = retro::parse_formula(formulas[i]);
    r.precursors = {retro::parse_formula("Li2CO3")};
    r.precursor_formulas = {"CLi2O3"};
    raws.push_back(r);
  }
  auto kb = retro::build_vocab_and_kb(raws);
  auto params = MpcParams::make(1, 16, rng);
  auto index = retro::build_mpc_index(kb, params);

  for (const auto* query : {"SiO2", "Ba0.5Sr0.5TiO3", "LiFePO4", "CsCl"}) {
    const auto target = retro::parse_formula(query);
    const auto rep = retro::mpc_rep(target.vector, params);
    for (int k : {1, 3, 5}) {
      for (std::optional<int> exclude : {std::optional<int>{}, std::optional<int>{0}}) {
        const auto got = retro::retrieve_mpc(target, params, index, k, exclude);
        CHECK(got.ids == brute_force(rep, target.vector, index, k, exclude));
      }
    }
  }
}

TEST_CASE("exact composition match ranks first when not excluded") {
  retro::Rng rng(7);
  std::vector<retro::RawRecipe> raws;
  for (const auto* f : {"SiO2", "BaTiO3", "MgO"}) {
    retro::RawRecipe r;
    r.id = f;
    r.target = retro::parse_formula(f);
    r.precursors = {retro::parse_formula("MgO")};
    r.precursor_formulas = {"MgO"};
    raws.push_back(r);
  }
  auto kb = retro::build_vocab_and_kb(raws);
  auto params = MpcParams::make(1, 8, rng);
  auto index = retro::build_mpc_index(kb, params);

  const auto target = retro::parse_formula("O3BaTi");
  const auto got = retro::retrieve_mpc(target, params, index, 1);
  REQUIRE(got.ids.size() == 1);
  CHECK(kb.recipes[static_cast<std::size_t>(got.ids[0])].id == "BaTiO3");
  const auto rep = retro::mpc_rep(target.vector, params);
  Eigen::VectorXd unit = rep / rep.norm();
  CHECK(unit.dot(index.reps.row(got.ids[0])) ==
        Catch::Approx(1.0).epsilon(1e-9));

  // Excluding the matching recipe id also removes its duplicate composition.
  const auto excluded = retro::retrieve_mpc(target, params, index, 3, 1);
  CHECK(excluded.ids == std::vector<int>{0, 2});
  CHECK(excluded.short_result);
}

TEST_CASE("retrieval ranking survives pre normalization scaling") {
  retro::Rng rng(8);
  std::vector<retro::RawRecipe> raws;
  for (const auto* f : {"SiO2", "BaTiO3", "MgO", "NaCl", "KCl"}) {
    retro::RawRecipe r;
    r.id = f;
    r.target = retro::parse_formula(f);
    r.precursors = {retro::parse_formula("MgO")};
    r.precursor_formulas = {"MgO"};
    raws.push_back(r);
  }
  auto kb = retro::build_vocab_and_kb(raws);
  auto params = MpcParams::make(1, 8, rng);
  auto index = retro::build_mpc_index(kb, params);

  retro::MpcIndex scaled = index;
  for (int r = 0; r < scaled.size(); ++r) {
    Eigen::VectorXd raw =
        retro::mpc_rep(kb.recipes[static_cast<std::size_t>(r)].target.vector,
                       params) *
        (1.0 + 2.0 * r);
    scaled.reps.row(r) = raw.transpose() / raw.norm();
  }
  const auto target = retro::parse_formula("CaTiO3");
  const auto a = retro::retrieve_mpc(target, params, index, 5);
  const auto b = retro::retrieve_mpc(target, params, scaled, 5);
  CHECK(a.ids == b.ids);
}
