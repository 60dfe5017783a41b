#pragma once

#include <map>
#include <string>
#include <vector>

#include "chanopt/graph.hpp"

namespace chanopt {

// Integer-linear depth expression: sum of channel variables (with
// multiplicity) plus a constant. Node depths and edge output depths are
// always of this form — a lone variable in the common case, a sum at
// concatenation nodes, a constant at source nodes.
struct LinearExpr {
  std::map<std::string, int> vars;  // variable name -> multiplicity (>= 1)
  long long constant = 0;

  bool is_constant() const { return vars.empty(); }
  bool is_single_var() const {
    return constant == 0 && vars.size() == 1 && vars.begin()->second == 1;
  }
  // Deterministic rendering, e.g. "v0 + 2*v3 + 64" or "3".
  std::string to_string() const;

  bool operator==(const LinearExpr&) const = default;
};

// The unique channel-size assignment of a graph: the minimal set of
// independent width variables plus every node's and depth-changing edge's
// depth expressed over them.
struct ChannelAssignment {
  std::vector<std::string> variables;            // canonical order v0, v1, ...
  std::map<std::string, LinearExpr> node_depth;  // node id -> depth
  std::map<std::string, LinearExpr> edge_out;    // conv/pointwise edge -> output depth
};

// Concrete widths: variable name -> channels (>= 1).
using ConcreteSizes = std::map<std::string, int>;

// Walks the graph in topological order: an unassigned summation (or plain)
// node mints a fresh variable shared by its inbound conv edges; an unassigned
// concatenation node mints one variable per inbound edge and sums them; every
// depth-preserving edge copies its tail's depth forward, or — when the head
// already has one — equates the two expressions, merging variables through a
// union-find. Equating two sums cancels common terms and lets a lone leftover
// variable absorb the residual; anything else is unsatisfiable and throws
// ConstraintConflict naming the two nodes.
ChannelAssignment assign_channels(const NetGraph& g);

// Sum of variable sizes plus constant. Throws IncompatibilityError if a
// variable is missing from sizes and std::invalid_argument on sizes < 1.
long long evaluate_depth(const LinearExpr& e, const ConcreteSizes& sizes);

struct ValidationIssue {
  std::string subject;  // node or edge id
  std::string message;
};

// Independent re-check of a bound assignment against the graph's rules:
// positive depths everywhere, equal depths across depth-preserving edges,
// inbound sizes matching at summation nodes, inbound sizes summing at
// concatenation nodes. Empty result = valid.
std::vector<ValidationIssue> validate_assignment(const NetGraph& g,
                                                 const ChannelAssignment& a,
                                                 const ConcreteSizes& sizes);

// Same checker on pre-evaluated depths; lets tests plant single-value faults.
std::vector<ValidationIssue> validate_concrete(
    const NetGraph& g, const std::map<std::string, long long>& node_depth,
    const std::map<std::string, long long>& edge_out);

// Total trainable parameters at the given widths: kernel volume times
// input/output channels per weight-bearing edge, plus declared bias and
// batchnorm terms, plus the classifier head when declared.
long long param_count(const NetGraph& g, const ChannelAssignment& a,
                      const ConcreteSizes& sizes);

// Groups depth-changing edges by the single variable their output feeds.
// Edges whose output depth is a compound expression belong to no group.
std::map<std::string, std::vector<std::string>> layer_groups(
    const NetGraph& g, const ChannelAssignment& a);

// Every variable bound to the same width.
ConcreteSizes uniform_sizes(const ChannelAssignment& a, int width);

// Widths taken from baseline declarations in the graph file. Each variable
// must be covered by at least one declaration (on a node or edge whose depth
// is exactly that variable) and all its declarations must agree.
ConcreteSizes baseline_sizes(const NetGraph& g, const ChannelAssignment& a);

// Sizes file: one "<variable> <width>" line per variable, '#' comments.
ConcreteSizes read_sizes_file(const std::string& path);
void write_sizes_file(const ConcreteSizes& sizes, const std::string& path);

}  // namespace chanopt
