//
// Project retro - Copyright 2026 The retro Authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "retro/autodiff.hpp"
#include "retro/features.hpp"
#include "retro/nn.hpp"
#include "retro/rng.hpp"

namespace retro {

using ad::Matrix;
using ad::Tape;

struct EncoderConfig {
  int feature_dim = 200;  // raw per-element feature width, fraction excluded
  int hidden_dim = 256;
  int layers = 3;
};

/// Graph network over fully connected composition graphs. The node encoder
/// sees the raw element feature with the element fraction appended; edges
/// carry the ordered concatenation of their endpoint features. Each of the
/// `layers` rounds updates every edge from its endpoints and then every node
/// from the sum of its outgoing edges. The material representation is the
/// sum of final node states.
struct EncoderParams {
  EncoderConfig config;
  nn::Mlp node_encoder;  // (F+1) -> D
  nn::Mlp edge_encoder;  // 2(F+1) -> D
  std::vector<nn::Mlp> edge_updaters;  // 3D -> D, one per layer
  std::vector<nn::Mlp> node_updaters;  // 2D -> D, one per layer

  static EncoderParams make(const EncoderConfig& config, Rng& rng) {
    if (config.layers < 1)
      throw std::invalid_argument("encoder needs at least one layer");
    EncoderParams p;
    p.config = config;
    const int in = config.feature_dim + 1;
    const int d = config.hidden_dim;
    p.node_encoder = nn::Mlp::make("enc.node", in, d, d, rng);
    p.edge_encoder = nn::Mlp::make("enc.edge", 2 * in, d, d, rng);
    for (int l = 0; l < config.layers; ++l) {
      const std::string tag = std::to_string(l);
      p.edge_updaters.push_back(
          nn::Mlp::make("enc.edge_upd" + tag, 3 * d, d, d, rng));
      p.node_updaters.push_back(
          nn::Mlp::make("enc.node_upd" + tag, 2 * d, d, d, rng));
    }
    return p;
  }

  std::vector<ad::Param*> params() {
    std::vector<ad::Param*> out;
    nn::append_params(out, node_encoder.params());
    nn::append_params(out, edge_encoder.params());
    for (auto& m : edge_updaters) nn::append_params(out, m.params());
    for (auto& m : node_updaters) nn::append_params(out, m.params());
    return out;
  }
};

/// Several composition graphs packed into one node table so a forward pass
/// is a handful of large matrix products instead of per-graph loops.
struct GraphBatch {
  Matrix node_features;        // total_nodes x (F+1)
  std::vector<int> edge_src;   // global node index per edge
  std::vector<int> edge_dst;
  std::vector<int> node_graph;  // owning graph per node
  int n_graphs = 0;
  int total_nodes = 0;

  static GraphBatch from(const std::vector<CompositionGraph>& graphs) {
    GraphBatch b;
    b.n_graphs = static_cast<int>(graphs.size());
    for (const auto& g : graphs) b.total_nodes += g.node_count();
    if (b.n_graphs == 0) return b;
    const Eigen::Index feat =
        graphs.front().features.cols();
    b.node_features = Matrix(b.total_nodes, feat + 1);
    int base = 0;
    for (int gi = 0; gi < b.n_graphs; ++gi) {
      const auto& g = graphs[gi];
      for (int i = 0; i < g.node_count(); ++i) {
        b.node_features.row(base + i).head(feat) = g.features.row(i);
        b.node_features(base + i, feat) = g.fractions(i);
        b.node_graph.push_back(gi);
      }
      for (const auto& [s, d] : g.edges) {
        b.edge_src.push_back(base + s);
        b.edge_dst.push_back(base + d);
      }
      base += g.node_count();
    }
    return b;
  }
};

namespace detail {

inline void check_encoder_input(const GraphBatch& batch,
                                const EncoderParams& params) {
  if (batch.n_graphs == 0) return;
  if (batch.node_features.cols() != params.config.feature_dim + 1)
    throw std::invalid_argument(
        "encoder input width " + std::to_string(batch.node_features.cols()) +
        " does not match node_encoder weight enc.node.w1 of input " +
        std::to_string(params.config.feature_dim + 1));
}

}  // namespace detail

/// Differentiable batched forward; returns an n_graphs x D node on the tape.
inline Tape::Id encode_on_tape(Tape& t, const GraphBatch& batch,
                               const EncoderParams& params) {
  detail::check_encoder_input(batch, params);
  auto x = t.constant(batch.node_features);
  auto nodes = params.node_encoder.forward(t, x);
  auto edges = params.edge_encoder.forward(
      t, t.concat_cols(t.gather_rows(x, batch.edge_src),
                       t.gather_rows(x, batch.edge_dst)));
  for (int l = 0; l < params.config.layers; ++l) {
    edges = params.edge_updaters[l].forward(
        t, t.concat_cols(t.gather_rows(nodes, batch.edge_src),
                         t.gather_rows(nodes, batch.edge_dst), edges));
    auto agg = t.segment_sum(edges, batch.edge_src, batch.total_nodes);
    nodes = params.node_updaters[l].forward(t, t.concat_cols(nodes, agg));
  }
  return t.segment_sum(nodes, batch.node_graph, batch.n_graphs);
}

/// Inference forward without a tape. Values match encode_on_tape exactly:
/// both run the same sequence of matrix products.
inline Matrix encode_batch_values(const GraphBatch& batch,
                                  const EncoderParams& params) {
  detail::check_encoder_input(batch, params);
  const int d = params.config.hidden_dim;
  if (batch.n_graphs == 0) return Matrix(0, d);
  const auto gather = [](const Matrix& m, const std::vector<int>& idx) {
    Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
    for (std::size_t r = 0; r < idx.size(); ++r)
      out.row(static_cast<Eigen::Index>(r)) = m.row(idx[r]);
    return out;
  };
  const auto seg_sum = [](const Matrix& m, const std::vector<int>& seg,
                          int n) {
    Matrix out = Matrix::Zero(n, m.cols());
    for (std::size_t r = 0; r < seg.size(); ++r)
      out.row(seg[r]) += m.row(static_cast<Eigen::Index>(r));
    return out;
  };
  const auto cat2 = [](const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), a.cols() + b.cols());
    out << a, b;
    return out;
  };

  const Matrix& x = batch.node_features;
  Matrix nodes = params.node_encoder.forward(x);
  Matrix edges = params.edge_encoder.forward(
      cat2(gather(x, batch.edge_src), gather(x, batch.edge_dst)));
  for (int l = 0; l < params.config.layers; ++l) {
    edges = params.edge_updaters[l].forward(cat2(
        cat2(gather(nodes, batch.edge_src), gather(nodes, batch.edge_dst)),
        edges));
    const Matrix agg = seg_sum(edges, batch.edge_src, batch.total_nodes);
    nodes = params.node_updaters[l].forward(cat2(nodes, agg));
  }
  return seg_sum(nodes, batch.node_graph, batch.n_graphs);
}

inline Eigen::VectorXd encode(const CompositionGraph& graph,
                              const EncoderParams& params) {
  if (graph.node_count() == 0)
    throw std::invalid_argument("encode: graph has no nodes");
  const GraphBatch b = GraphBatch::from({graph});
  return encode_batch_values(b, params).row(0).transpose();
}

inline std::vector<Eigen::VectorXd> encode_batch(
    const std::vector<CompositionGraph>& graphs, const EncoderParams& params) {
  const Matrix g = encode_batch_values(GraphBatch::from(graphs), params);
  std::vector<Eigen::VectorXd> out;
  out.reserve(graphs.size());
  for (Eigen::Index r = 0; r < g.rows(); ++r)
    out.push_back(g.row(r).transpose());
  return out;
}

}  // namespace retro
