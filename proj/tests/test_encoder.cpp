//
// Project retro - Copyright 2026 The retro Authors.
// SPDX-License-Identifier: Apache-2.0
//

#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "gradcheck.hpp"
#include "retro/composition.hpp"
#include "retro/encoder.hpp"
#include "retro/features.hpp"

using retro::CompositionGraph;
using retro::EncoderConfig;
using retro::EncoderParams;
using retro::GraphBatch;
using retro::Matrix;

namespace {

CompositionGraph graph_of(const std::string& formula,
                          const retro::ElementFeatureTable& feats) {
  return retro::build_graph(retro::parse_formula(formula), feats);
}

retro::ElementFeatureTable small_features() {
  return retro::fallback_element_features(3, 77);
}

/// Writes weights so the two-layer MLP computes y_k = sum of input pairs,
/// exactly, as long as all intermediate values stay positive.
void set_pair_sum(retro::nn::Mlp& m) {
  const auto in = m.w1.value.rows();
  const auto hidden = m.w1.value.cols();
  m.w1.value.setZero();
  for (Eigen::Index i = 0; i < in; ++i) m.w1.value(i, i % hidden) = 1.0;
  m.b1.value.setZero();
  m.w2.value = Matrix::Identity(hidden, m.w2.value.cols());
  m.b2.value.setZero();
}

}  // namespace

TEST_CASE("single node graph uses the zero edge sum") {
  auto feats = small_features();
  retro::Rng rng(3);
  auto params = EncoderParams::make({3, 4, 2}, rng);
  auto g = graph_of("O2", feats);
  REQUIRE(g.node_count() == 1);
  REQUIRE(g.edge_count() == 0);

  const Eigen::VectorXd out = retro::encode(g, params);

  // Oracle: run the update chain by hand with an explicit zero aggregate.
  Matrix u(1, 4);
  u.row(0).head(3) = g.features.row(0);
  u(0, 3) = g.fractions(0);
  Matrix e = params.node_encoder.forward(u);
  for (int l = 0; l < 2; ++l) {
    Matrix cat(1, 8);
    cat << e, Matrix::Zero(1, 4);
    e = params.node_updaters[l].forward(cat);
  }
  CHECK((out.transpose() - e.row(0)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("two node trace with hand set weights") {
  // Feature width 1, hidden width 2, one layer. All weights are pair-sum
  // maps, all activations stay positive, so the whole network reduces to
  // integer arithmetic done by hand below.
  retro::Rng rng(4);
  auto params = EncoderParams::make({1, 2, 1}, rng);
  set_pair_sum(params.node_encoder);
  set_pair_sum(params.edge_encoder);
  set_pair_sum(params.edge_updaters[0]);
  set_pair_sum(params.node_updaters[0]);

  CompositionGraph g;
  g.elements = {"H", "He"};
  g.features = Matrix(2, 1);
  g.features << 1.0, 2.0;
  g.fractions = Eigen::VectorXd(2);
  g.fractions << 0.25, 0.75;
  g.edges = {{0, 1}, {1, 0}};

  // Node inputs u1=[1,.25], u2=[2,.75]; encoders pass them through.
  // Initial edges: a01=[3,1], a10=[3,1].
  // Edge update sums endpoint states and the edge: both edges become [6,2].
  // Node update adds each node's outgoing sum: e1=[7,2.25], e2=[8,2.75].
  // Pooling: g=[15,5].
  const Eigen::VectorXd out = retro::encode(g, params);
  REQUIRE(out.size() == 2);
  CHECK(out(0) == Catch::Approx(15.0).epsilon(1e-12));
  CHECK(out(1) == Catch::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("node order permutation leaves the representation unchanged") {
  auto feats = small_features();
  retro::Rng rng(5);
  auto params = EncoderParams::make({3, 8, 3}, rng);

  auto g = graph_of("SiO2", feats);
  REQUIRE(g.node_count() == 2);
  CompositionGraph perm;
  perm.elements = {g.elements[1], g.elements[0]};
  perm.features = Matrix(2, 3);
  perm.features.row(0) = g.features.row(1);
  perm.features.row(1) = g.features.row(0);
  perm.fractions = Eigen::VectorXd(2);
  perm.fractions << g.fractions(1), g.fractions(0);
  perm.edges = {{1, 0}, {0, 1}};

  const auto a = retro::encode(g, params);
  const auto b = retro::encode(perm, params);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-6);

  auto g4 = graph_of("LiFePO4", feats);
  CompositionGraph perm4;
  const std::vector<int> pi = {2, 0, 3, 1};
  perm4.features = Matrix(4, 3);
  perm4.fractions = Eigen::VectorXd(4);
  perm4.elements.resize(4);
  std::vector<int> inv(4);
  for (int i = 0; i < 4; ++i) inv[pi[i]] = i;
  for (int i = 0; i < 4; ++i) {
    perm4.elements[i] = g4.elements[pi[i]];
    perm4.features.row(i) = g4.features.row(pi[i]);
    perm4.fractions(i) = g4.fractions(pi[i]);
  }
  for (const auto& [s, d] : g4.edges) perm4.edges.push_back({inv[s], inv[d]});
  CHECK((retro::encode(g4, params) - retro::encode(perm4, params))
            .cwiseAbs()
            .maxCoeff() < 1e-6);
}

TEST_CASE("fractions reach the encoder input") {
  auto feats = small_features();
  retro::Rng rng(6);
  auto params = EncoderParams::make({3, 8, 2}, rng);
  const auto a = retro::encode(graph_of("SiO2", feats), params);
  const auto b = retro::encode(graph_of("SiO", feats), params);
  CHECK((a - b).cwiseAbs().maxCoeff() > 1e-8);
}

TEST_CASE("batch encode equals per graph encode") {
  auto feats = small_features();
  retro::Rng rng(7);
  auto params = EncoderParams::make({3, 8, 3}, rng);
  std::vector<CompositionGraph> graphs = {
      graph_of("SiO2", feats), graph_of("O2", feats),
      graph_of("LiFePO4", feats), graph_of("Ca(OH)2", feats),
      graph_of("La0.7Sr0.3MnO3", feats)};
  const auto batched = retro::encode_batch(graphs, params);
  REQUIRE(batched.size() == graphs.size());
  for (std::size_t i = 0; i < graphs.size(); ++i) {
    const auto solo = retro::encode(graphs[i], params);
    CHECK((batched[i] - solo).cwiseAbs().maxCoeff() <= 1e-6);
  }

  CHECK(retro::encode_batch({}, params).empty());
  const auto one = retro::encode_batch({graphs[0]}, params);
  REQUIRE(one.size() == 1);
  CHECK((one[0] - retro::encode(graphs[0], params)).cwiseAbs().maxCoeff() <=
        1e-6);
}

TEST_CASE("every configured layer participates") {
  auto feats = small_features();
  retro::Rng rng(8);
  auto params = EncoderParams::make({3, 4, 3}, rng);
  REQUIRE(params.edge_updaters.size() == 3);
  REQUIRE(params.node_updaters.size() == 3);
  const auto g = graph_of("SiO2", feats);
  const auto base = retro::encode(g, params);
  for (int l = 0; l < 3; ++l) {
    auto tweaked = params;
    tweaked.node_updaters[l].w2.value.array() += 0.5;
    CHECK((retro::encode(g, tweaked) - base).cwiseAbs().maxCoeff() > 1e-8);
  }
}

TEST_CASE("tape forward matches the plain forward") {
  auto feats = small_features();
  retro::Rng rng(9);
  auto params = EncoderParams::make({3, 8, 2}, rng);
  std::vector<CompositionGraph> graphs = {graph_of("SiO2", feats),
                                          graph_of("LiFePO4", feats)};
  const auto batch = GraphBatch::from(graphs);
  retro::Tape t;
  auto id = retro::encode_on_tape(t, batch, params);
  CHECK(t.value(id).isApprox(retro::encode_batch_values(batch, params), 1e-12));
}

TEST_CASE("encoder gradients match finite differences") {
  auto feats = small_features();
  retro::Rng rng(10);
  auto params = EncoderParams::make({3, 4, 2}, rng);
  std::vector<CompositionGraph> graphs = {graph_of("SiO2", feats),
                                          graph_of("Ca(OH)2", feats)};
  const auto batch = GraphBatch::from(graphs);
  auto res = testutil::check_gradients(params.params(), [&](retro::Tape& t) {
    return t.mean_all(retro::encode_on_tape(t, batch, params));
  });
  CHECK(res.max_rel_err <= 1e-3);
}

TEST_CASE("feature width mismatch names the offending tensor") {
  auto feats = retro::fallback_element_features(5, 1);
  retro::Rng rng(11);
  auto params = EncoderParams::make({3, 4, 1}, rng);
  const auto g = graph_of("SiO2", feats);
  CHECK_THROWS_WITH(retro::encode(g, params),
                    Catch::Matchers::ContainsSubstring("enc.node.w1"));
}
