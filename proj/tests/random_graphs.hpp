#pragma once

#include <string>
#include <vector>

#include "chanopt/assignment.hpp"
#include "chanopt/errors.hpp"
#include "chanopt/graph.hpp"
#include "chanopt/rng.hpp"

namespace testutil {

// Random layered DAG: nodes n00..nXX in topological index order, node 0 the
// single source, every later node fed by 1..3 earlier ones. Concatenation
// nodes only receive depth-changing edges (the structural rule); everything
// else mixes all edge kinds. Acyclic and single-source by construction, but
// depth constraints may still be unsatisfiable (e.g. chained skips equating
// two concatenations), so callers pair this with try_assign below.
inline chanopt::NetGraph random_dag(chanopt::Rng& rng, int max_nodes = 30) {
  using chanopt::CombineMode;
  using chanopt::EdgeKind;
  chanopt::NetGraph g;
  const int n = 4 + static_cast<int>(rng.next_below(max_nodes - 3));
  auto name = [](int i) {
    std::string s = "n";
    if (i < 10) s += "0";
    return s + std::to_string(i);
  };

  chanopt::GraphNode src;
  src.id = name(0);
  src.input_depth = 3;
  g.add_node(src);

  int edge_counter = 0;
  for (int j = 1; j < n; ++j) {
    int fan_in = 1 + static_cast<int>(rng.next_below(std::min(3, j)));
    chanopt::GraphNode node;
    node.id = name(j);
    bool concat = false;
    if (fan_in >= 2) {
      concat = rng.next_below(2) == 0;
      node.combine = concat ? CombineMode::kConcatenation : CombineMode::kSummation;
    }
    g.add_node(node);

    // Distinct tails among 0..j-1.
    std::vector<int> tails;
    while (static_cast<int>(tails.size()) < fan_in) {
      int t = static_cast<int>(rng.next_below(j));
      bool dup = false;
      for (int x : tails) dup |= (x == t);
      if (!dup) tails.push_back(t);
    }

    for (int t : tails) {
      chanopt::GraphEdge e;
      e.id = "e" + std::to_string(edge_counter++);
      e.tail = name(t);
      e.head = name(j);
      if (concat) {
        e.kind = rng.next_below(2) == 0 ? EdgeKind::kConv : EdgeKind::kPointwise;
      } else {
        switch (rng.next_below(6)) {
          case 0: e.kind = EdgeKind::kConv; break;
          case 1: e.kind = EdgeKind::kPointwise; break;
          case 2: e.kind = EdgeKind::kDepthwise; break;
          case 3: e.kind = EdgeKind::kSkip; break;
          case 4: e.kind = EdgeKind::kPool; break;
          default: e.kind = EdgeKind::kNonConv; break;
        }
      }
      if (e.kind == EdgeKind::kConv || e.kind == EdgeKind::kDepthwise) {
        e.kh = e.kw = rng.next_below(2) == 0 ? 3 : 1;
      } else if (e.kind == EdgeKind::kPointwise) {
        e.kh = e.kw = 1;
      }
      if (chanopt::is_weight_bearing(e.kind)) {
        e.has_bias = rng.next_below(2) == 0;
        e.has_batchnorm = rng.next_below(3) == 0;
      }
      g.add_edge(e);
    }
  }
  return g;
}

// Draws random DAGs until one admits a channel assignment, discarding the
// unsatisfiable ones (the generator can wire constraints with no solution).
inline std::pair<chanopt::NetGraph, chanopt::ChannelAssignment> satisfiable_dag(
    chanopt::Rng& rng, int max_nodes = 30) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    chanopt::NetGraph g = random_dag(rng, max_nodes);
    try {
      g.validate();
      chanopt::ChannelAssignment a = chanopt::assign_channels(g);
      return {std::move(g), std::move(a)};
    } catch (const chanopt::ConstraintConflict&) {
      continue;
    }
  }
  throw std::runtime_error("satisfiable_dag: no satisfiable graph in 1000 draws");
}

}  // namespace testutil
