#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "protoprop/common.hpp"
#include "protoprop/synthdata.hpp"
#include "protoprop/tape.hpp"
#include "protoprop/tensor.hpp"

namespace protoprop {

// Bipartite prototype-propagation graph. Node order is [attributes |A|,
// objects |O|, compositions |Y|]; every composition node connects to its
// attribute node and its object node and nothing else.
struct CompositionGraph {
  std::size_t num_attrs = 0;
  std::size_t num_objs = 0;
  std::vector<CompositionalLabel> comps;
  Tensor adjacency;  // [n, n], symmetric 0/1
  std::vector<std::pair<std::size_t, std::size_t>> edges;  // (primitive, comp)

  std::size_t size() const { return num_attrs + num_objs + comps.size(); }
  std::size_t attr_node(std::size_t a) const { return a; }
  std::size_t obj_node(std::size_t o) const { return num_attrs + o; }
  std::size_t comp_node(std::size_t i) const {
    return num_attrs + num_objs + i;
  }
};

// Unlike dataset generation, graph construction accepts degenerate grids
// (single attribute or object); it only requires referenced primitives to
// exist.
inline CompositionGraph build_graph(
    const PrimitiveVocab& vocab,
    const std::vector<CompositionalLabel>& compositions) {
  CompositionGraph g;
  g.num_attrs = vocab.num_attrs();
  g.num_objs = vocab.num_objs();
  g.comps = compositions;
  for (std::size_t i = 0; i < compositions.size(); ++i) {
    const CompositionalLabel& c = compositions[i];
    if (c.attribute >= g.num_attrs || c.object >= g.num_objs) {
      throw ContractError("build_graph: composition references a primitive "
                          "outside the vocabulary");
    }
    for (std::size_t j = i + 1; j < compositions.size(); ++j) {
      if (compositions[j] == c) {
        throw ContractError("build_graph: duplicate composition (" +
                            vocab.attributes[c.attribute].name + ", " +
                            vocab.objects[c.object].name + ")");
      }
    }
  }
  const std::size_t n = g.size();
  g.adjacency = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < g.comps.size(); ++i) {
    const std::size_t cn = g.comp_node(i);
    const std::size_t an = g.attr_node(g.comps[i].attribute);
    const std::size_t on = g.obj_node(g.comps[i].object);
    g.adjacency(an, cn) = 1.0;
    g.adjacency(cn, an) = 1.0;
    g.adjacency(on, cn) = 1.0;
    g.adjacency(cn, on) = 1.0;
    g.edges.emplace_back(an, cn);
    g.edges.emplace_back(on, cn);
  }
  return g;
}

// D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I. Self-loops keep
// every degree positive, so no division guard is needed.
inline Tensor normalize_adjacency(const Tensor& adjacency) {
  if (adjacency.rank() != 2 || adjacency.rows() != adjacency.cols()) {
    throw ShapeError("normalize_adjacency expects a square matrix");
  }
  const std::size_t n = adjacency.rows();
  Tensor hat = adjacency;
  for (std::size_t i = 0; i < n; ++i) hat(i, i) += 1.0;
  std::vector<double> inv_sqrt_deg(n);
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0.0;
    for (std::size_t j = 0; j < n; ++j) d += hat(i, j);
    inv_sqrt_deg[i] = 1.0 / std::sqrt(d);
  }
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out(i, j) = hat(i, j) * inv_sqrt_deg[i] * inv_sqrt_deg[j];
  return out;
}

inline Tensor normalize_adjacency(const CompositionGraph& g) {
  return normalize_adjacency(g.adjacency);
}

// Two linear graph layers without bias: X'' = Anorm (Anorm X T1) T2.
struct PropagationWeights {
  Tensor theta1;  // [C, d_h]
  Tensor theta2;  // [d_h, C_out]

  static PropagationWeights init(std::size_t c, std::size_t d_h,
                                 std::size_t c_out, Rng& rng) {
    if (c == 0 || d_h == 0 || c_out == 0) {
      throw ContractError("propagation widths must be positive");
    }
    PropagationWeights w;
    w.theta1 = glorot({c, d_h}, rng);
    w.theta2 = glorot({d_h, c_out}, rng);
    return w;
  }

 private:
  static Tensor glorot(std::vector<std::size_t> shape, Rng& rng) {
    const double bound =
        std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) {
      t.at(i) = rng.uniform(-bound, bound);
    }
    return t;
  }
};

// Stacks [attribute prototypes; object prototypes; zeros] into the node
// feature matrix [n, C]. Composition rows start at zero and only receive
// content through propagation.
inline VarId init_node_features(Tape& t, const CompositionGraph& g,
                                VarId attr_protos, VarId obj_protos) {
  const Tensor& av = t.value(attr_protos);
  const Tensor& ov = t.value(obj_protos);
  if (av.rank() != 2 || ov.rank() != 2 || av.cols() != ov.cols()) {
    throw ShapeError("init_node_features: prototype widths differ");
  }
  if (av.rows() != g.num_attrs || ov.rows() != g.num_objs) {
    throw ShapeError("init_node_features: prototype counts disagree with "
                     "the graph");
  }
  const VarId zeros =
      t.leaf(Tensor::zeros({g.comps.size(), av.cols()}), false);
  return t.concat_rows(t.concat_rows(attr_protos, obj_protos), zeros);
}

// Propagates node features through both layers and returns the
// composition-node rows [|Y|, C_out].
inline VarId propagate(Tape& t, const CompositionGraph& g, VarId features,
                       const Tensor& a_norm, VarId theta1, VarId theta2) {
  if (a_norm.rank() != 2 || a_norm.rows() != g.size() ||
      a_norm.cols() != g.size()) {
    throw ShapeError("propagate: adjacency size disagrees with the graph");
  }
  const VarId an = t.leaf(a_norm, false);
  const VarId h1 = t.matmul(t.matmul(an, features), theta1);
  const VarId h2 = t.matmul(t.matmul(an, h1), theta2);
  return t.slice_rows(h2, g.comp_node(0), g.size());
}

// Dot product of each pooled backbone feature row with every compositional
// prototype: [N, C_out] x [|Y|, C_out] -> [N, |Y|].
inline VarId comp_scores(Tape& t, VarId comp_protos, VarId pooled) {
  if (t.value(comp_protos).cols() != t.value(pooled).cols()) {
    throw ShapeError("comp_scores: feature widths differ; configure the "
                     "pooled projection when C != C_out");
  }
  return t.matmul(pooled, t.transpose(comp_protos));
}

// Argmax with ties broken toward the lowest composition index.
inline std::size_t classify_index(const Tensor& scores) {
  if (scores.size() == 0) {
    throw ContractError("classify: empty score vector");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores.at(i) > scores.at(best)) best = i;
  }
  return best;
}

inline CompositionalLabel classify(const CompositionGraph& g,
                                   const Tensor& scores) {
  if (scores.size() != g.comps.size()) {
    throw ShapeError("classify: one score per composition required");
  }
  return g.comps[classify_index(scores)];
}

// One line per edge, composition-major: the attribute edge then the object
// edge of each composition node.
inline std::string export_edge_list(const CompositionGraph& g,
                                    const PrimitiveVocab& vocab) {
  std::string out;
  for (const CompositionalLabel& c : g.comps) {
    const std::string comp = "comp:" + vocab.attributes[c.attribute].name +
                             "," + vocab.objects[c.object].name;
    out += "attr:" + vocab.attributes[c.attribute].name + " " + comp + "\n";
    out += "obj:" + vocab.objects[c.object].name + " " + comp + "\n";
  }
  return out;
}

}  // namespace protoprop
