#include "chanopt/assignment.hpp"

#include <algorithm>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

#include "chanopt/errors.hpp"

namespace chanopt {

std::string LinearExpr::to_string() const {
  std::string out;
  for (const auto& [name, mult] : vars) {
    if (!out.empty()) out += " + ";
    if (mult != 1) out += std::to_string(mult) + "*";
    out += name;
  }
  if (constant != 0 || out.empty()) {
    if (!out.empty()) out += " + ";
    out += std::to_string(constant);
  }
  return out;
}

namespace {

// Expression over raw (pre-canonical) variable ids.
struct RawExpr {
  std::map<int, int> vars;
  long long constant = 0;

  void add_var(int v, int mult = 1) {
    if ((vars[v] += mult) == 0) vars.erase(v);
  }
  void add(const RawExpr& other, int mult = 1) {
    for (const auto& [v, m] : other.vars) add_var(v, m * mult);
    constant += other.constant * mult;
  }
  bool is_single_var() const {
    return constant == 0 && vars.size() == 1 && vars.begin()->second == 1;
  }
};

// Union-find over channel variables, where a class representative may be
// bound ("aliased") to an expression over other variables — that is how one
// variable absorbs a residual like v2 = v0 + v1 or v2 = 3.
class VarStore {
 public:
  int fresh() {
    parent_.push_back(static_cast<int>(parent_.size()));
    rank_.push_back(0);
    alias_.emplace_back();
    return static_cast<int>(parent_.size()) - 1;
  }

  int find(int v) {
    while (parent_[v] != v) {
      parent_[v] = parent_[parent_[v]];
      v = parent_[v];
    }
    return v;
  }

  // Substitutes aliases until only unbound roots remain.
  RawExpr resolve(const RawExpr& e) {
    RawExpr out;
    out.constant = e.constant;
    for (const auto& [v, mult] : e.vars) {
      expand_into(out, find(v), mult, 0);
    }
    return out;
  }

  void union_roots(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (rank_[a] < rank_[b]) std::swap(a, b);
    parent_[b] = a;
    if (rank_[a] == rank_[b]) ++rank_[a];
  }

  void bind(int root, RawExpr e) { alias_[root] = std::move(e); }
  bool is_bound(int root) const { return alias_[root].has_value(); }

 private:
  void expand_into(RawExpr& out, int root, int mult, int depth) {
    if (depth > static_cast<int>(parent_.size())) {
      throw std::logic_error("assign_channels: cyclic variable binding");
    }
    if (!alias_[root]) {
      out.add_var(root, mult);
      return;
    }
    const RawExpr& a = *alias_[root];
    out.constant += a.constant * mult;
    for (const auto& [v, m] : a.vars) {
      expand_into(out, find(v), m * mult, depth + 1);
    }
  }

  std::vector<int> parent_;
  std::vector<int> rank_;
  std::vector<std::optional<RawExpr>> alias_;
};

class Assigner {
 public:
  explicit Assigner(const NetGraph& g) : g_(g) {}

  ChannelAssignment run() {
    const auto order = topo_queue(g_);
    for (const auto& node_id : order) {
      visit(node_id);
    }
    return canonicalize(order);
  }

 private:
  void visit(const std::string& node_id) {
    const GraphNode& n = g_.node(node_id);
    const auto& inbound = g_.inbound(node_id);
    if (!node_expr_.count(node_id)) {
      // Unassigned when pulled: all inbound edges are depth-changing
      // (anything else would have propagated a depth already).
      RawExpr expr;
      if (inbound.empty()) {
        expr.constant = n.input_depth;
      } else if (n.combine == CombineMode::kConcatenation) {
        for (const auto& eid : inbound) {
          RawExpr branch;
          branch.add_var(store_.fresh());
          edge_expr_[eid] = branch;
          expr.add(branch);
        }
      } else {
        RawExpr shared;
        shared.add_var(store_.fresh());
        for (const auto& eid : inbound) {
          edge_expr_[eid] = shared;
        }
        expr = shared;
      }
      node_expr_[node_id] = expr;
    } else if (n.combine != CombineMode::kConcatenation) {
      // Depth arrived from a depth-preserving edge; inbound depth-changing
      // edges must produce exactly that depth.
      for (const auto& eid : inbound) {
        if (is_depth_changing(g_.edge(eid).kind)) {
          edge_expr_[eid] = node_expr_[node_id];
        }
      }
    }
    // Push depth along depth-preserving outbound edges.
    for (const auto& eid : g_.outbound(node_id)) {
      const GraphEdge& e = g_.edge(eid);
      if (is_depth_changing(e.kind)) continue;
      if (!node_expr_.count(e.head)) {
        node_expr_[e.head] = node_expr_[node_id];
      } else {
        equate(node_expr_[e.head], node_expr_[node_id], e.head, node_id);
      }
    }
  }

  void equate(const RawExpr& a, const RawExpr& b, const std::string& node_a,
              const std::string& node_b) {
    RawExpr ra = store_.resolve(a);
    RawExpr rb = store_.resolve(b);
    // diff = ra - rb must be identically zero.
    RawExpr diff = ra;
    diff.add(rb, -1);
    if (diff.vars.empty()) {
      if (diff.constant != 0) conflict(node_a, node_b, ra, rb);
      return;
    }
    // Side with positive multiplicities vs. side with negative ones:
    // P + diff.constant = Q.
    RawExpr p, q;
    for (const auto& [v, m] : diff.vars) {
      if (m > 0) {
        p.add_var(v, m);
      } else {
        q.add_var(v, -m);
      }
    }
    p.constant = diff.constant;
    auto lone = [](const RawExpr& e) {
      return e.vars.size() == 1 && e.vars.begin()->second == 1;
    };
    if (p.vars.empty() || q.vars.empty()) {
      // k*v = c: a variable pinned to a constant share.
      const RawExpr& side = p.vars.empty() ? q : p;
      const long long c = p.vars.empty() ? p.constant : -p.constant;
      if (side.vars.size() == 1) {
        const auto [v, mult] = *side.vars.begin();
        if (c >= mult && c % mult == 0) {
          RawExpr constant;
          constant.constant = c / mult;
          store_.bind(v, constant);
          return;
        }
      }
      conflict(node_a, node_b, ra, rb);
    }
    if (lone(p) && lone(q) && p.constant == 0) {
      store_.union_roots(p.vars.begin()->first, q.vars.begin()->first);
      return;
    }
    // One lone variable absorbs the residual. Prefer the orientation that
    // keeps the alias constant non-negative.
    if (lone(q) && p.constant >= 0) {
      store_.bind(q.vars.begin()->first, p);  // w = P + c
      return;
    }
    if (lone(p) && p.constant <= 0) {
      RawExpr rest = q;
      rest.constant = -p.constant;  // v = Q + (-c)
      store_.bind(p.vars.begin()->first, rest);
      return;
    }
    if (lone(q)) {
      store_.bind(q.vars.begin()->first, p);
      return;
    }
    if (lone(p)) {
      RawExpr rest = q;
      rest.constant = -p.constant;
      store_.bind(p.vars.begin()->first, rest);
      return;
    }
    conflict(node_a, node_b, ra, rb);
  }

  [[noreturn]] void conflict(const std::string& node_a,
                             const std::string& node_b, const RawExpr& ra,
                             const RawExpr& rb) {
    throw ConstraintConflict(
        "assign_channels: depth of node '" + node_a +
        "' cannot be reconciled with node '" + node_b + "' (" +
        debug_string(ra) + " vs " + debug_string(rb) + ")");
  }

  static std::string debug_string(const RawExpr& e) {
    std::string out;
    for (const auto& [v, m] : e.vars) {
      if (!out.empty()) out += " + ";
      if (m != 1) out += std::to_string(m) + "*";
      out += "x" + std::to_string(v);
    }
    if (e.constant != 0 || out.empty()) {
      if (!out.empty()) out += " + ";
      out += std::to_string(e.constant);
    }
    return out;
  }

  ChannelAssignment canonicalize(const std::vector<std::string>& order) {
    // Canonical variable names in order of first appearance over the
    // deterministic node walk, then edge walk.
    std::map<int, std::string> names;
    auto name_of = [&](int root) -> const std::string& {
      auto it = names.find(root);
      if (it == names.end()) {
        it = names.emplace(root, "v" + std::to_string(names.size())).first;
        ordered_.push_back(it->second);
      }
      return it->second;
    };
    auto to_linear = [&](const RawExpr& raw) {
      const RawExpr r = store_.resolve(raw);
      LinearExpr e;
      e.constant = r.constant;
      for (const auto& [v, m] : r.vars) {
        e.vars[name_of(v)] += m;
      }
      return e;
    };

    ChannelAssignment out;
    // Two passes so that resolution happens once per expression while names
    // are assigned in walk order.
    for (const auto& node_id : order) {
      out.node_depth[node_id] = to_linear(node_expr_.at(node_id));
    }
    for (const auto& eid : g_.edge_ids()) {
      if (is_depth_changing(g_.edge(eid).kind)) {
        out.edge_out[eid] = to_linear(edge_expr_.at(eid));
      }
    }
    out.variables = ordered_;
    return out;
  }

  const NetGraph& g_;
  VarStore store_;
  std::map<std::string, RawExpr> node_expr_;
  std::map<std::string, RawExpr> edge_expr_;
  std::vector<std::string> ordered_;
};

}  // namespace

ChannelAssignment assign_channels(const NetGraph& g) {
  g.validate();
  return Assigner(g).run();
}

long long evaluate_depth(const LinearExpr& e, const ConcreteSizes& sizes) {
  long long total = e.constant;
  for (const auto& [name, mult] : e.vars) {
    auto it = sizes.find(name);
    if (it == sizes.end()) {
      throw IncompatibilityError("evaluate_depth: no size bound for variable '" +
                                 name + "'");
    }
    if (it->second < 1) {
      throw std::invalid_argument("evaluate_depth: size of '" + name +
                                  "' must be >= 1");
    }
    total += static_cast<long long>(mult) * it->second;
  }
  return total;
}

std::vector<ValidationIssue> validate_concrete(
    const NetGraph& g, const std::map<std::string, long long>& node_depth,
    const std::map<std::string, long long>& edge_out) {
  std::vector<ValidationIssue> issues;
  auto depth_of = [&](const std::string& node_id) {
    auto it = node_depth.find(node_id);
    if (it == node_depth.end()) {
      throw IncompatibilityError("validate: node '" + node_id +
                                 "' has no bound depth");
    }
    return it->second;
  };
  // Output size an edge delivers to its head.
  auto edge_output = [&](const std::string& eid) {
    const GraphEdge& e = g.edge(eid);
    if (is_depth_changing(e.kind)) {
      auto it = edge_out.find(eid);
      if (it == edge_out.end()) {
        throw IncompatibilityError("validate: edge '" + eid +
                                   "' has no bound output depth");
      }
      return it->second;
    }
    return depth_of(e.tail);
  };

  for (const auto& node_id : g.node_ids()) {
    if (depth_of(node_id) < 1) {
      issues.push_back({node_id, "depth must be >= 1, got " +
                                     std::to_string(depth_of(node_id))});
    }
  }
  for (const auto& eid : g.edge_ids()) {
    const GraphEdge& e = g.edge(eid);
    if (is_depth_changing(e.kind)) {
      if (edge_output(eid) < 1) {
        issues.push_back({eid, "output depth must be >= 1"});
      }
    } else if (depth_of(e.tail) != depth_of(e.head)) {
      issues.push_back(
          {eid, "depth-preserving edge connects depth " +
                    std::to_string(depth_of(e.tail)) + " to depth " +
                    std::to_string(depth_of(e.head))});
    }
  }
  for (const auto& node_id : g.node_ids()) {
    const GraphNode& n = g.node(node_id);
    const auto& inbound = g.inbound(node_id);
    if (inbound.empty()) continue;
    if (n.combine == CombineMode::kConcatenation) {
      long long total = 0;
      for (const auto& eid : inbound) total += edge_output(eid);
      if (total != depth_of(node_id)) {
        issues.push_back({node_id, "concatenation total " +
                                       std::to_string(total) +
                                       " != node depth " +
                                       std::to_string(depth_of(node_id))});
      }
    } else {
      for (const auto& eid : inbound) {
        if (edge_output(eid) != depth_of(node_id)) {
          issues.push_back({node_id, "inbound edge '" + eid + "' delivers " +
                                         std::to_string(edge_output(eid)) +
                                         " channels, node depth is " +
                                         std::to_string(depth_of(node_id))});
        }
      }
    }
  }
  return issues;
}

std::vector<ValidationIssue> validate_assignment(const NetGraph& g,
                                                 const ChannelAssignment& a,
                                                 const ConcreteSizes& sizes) {
  std::map<std::string, long long> node_depth;
  std::map<std::string, long long> edge_out;
  for (const auto& [node_id, expr] : a.node_depth) {
    node_depth[node_id] = evaluate_depth(expr, sizes);
  }
  for (const auto& [eid, expr] : a.edge_out) {
    edge_out[eid] = evaluate_depth(expr, sizes);
  }
  return validate_concrete(g, node_depth, edge_out);
}

long long param_count(const NetGraph& g, const ChannelAssignment& a,
                      const ConcreteSizes& sizes) {
  long long total = 0;
  for (const auto& eid : g.edge_ids()) {
    const GraphEdge& e = g.edge(eid);
    if (!is_weight_bearing(e.kind)) continue;
    const long long c_in = evaluate_depth(a.node_depth.at(e.tail), sizes);
    long long c_out;
    long long kernel_params;
    if (e.kind == EdgeKind::kDepthwise) {
      c_out = c_in;  // one filter per channel
      kernel_params = static_cast<long long>(e.kh) * e.kw * c_in;
    } else {
      c_out = evaluate_depth(a.edge_out.at(eid), sizes);
      kernel_params = static_cast<long long>(e.kh) * e.kw * c_in * c_out;
    }
    total += kernel_params;
    if (e.has_bias) total += c_out;
    if (e.has_batchnorm) total += 2 * c_out;
  }
  if (g.has_head()) {
    const long long c_last =
        evaluate_depth(a.node_depth.at(g.head_node()), sizes);
    total += c_last * g.num_classes() + g.num_classes();
  }
  return total;
}

std::map<std::string, std::vector<std::string>> layer_groups(
    const NetGraph& g, const ChannelAssignment& a) {
  std::map<std::string, std::vector<std::string>> groups;
  for (const auto& name : a.variables) groups[name];
  for (const auto& [eid, expr] : a.edge_out) {
    if (expr.is_single_var()) {
      groups[expr.vars.begin()->first].push_back(eid);
    }
  }
  return groups;
}

ConcreteSizes uniform_sizes(const ChannelAssignment& a, int width) {
  if (width < 1) {
    throw std::invalid_argument("uniform_sizes: width must be >= 1");
  }
  ConcreteSizes sizes;
  for (const auto& name : a.variables) sizes[name] = width;
  return sizes;
}

ConcreteSizes baseline_sizes(const NetGraph& g, const ChannelAssignment& a) {
  std::map<std::string, std::set<int>> declared;
  for (const auto& node_id : g.node_ids()) {
    const GraphNode& n = g.node(node_id);
    if (n.baseline == 0) continue;
    const LinearExpr& expr = a.node_depth.at(node_id);
    if (!expr.is_single_var()) {
      throw IncompatibilityError(
          "baseline_sizes: node '" + node_id +
          "' declares a baseline but its depth is the compound expression " +
          expr.to_string());
    }
    declared[expr.vars.begin()->first].insert(n.baseline);
  }
  for (const auto& [eid, expr] : a.edge_out) {
    const GraphEdge& e = g.edge(eid);
    if (e.baseline == 0) continue;
    if (!expr.is_single_var()) {
      throw IncompatibilityError(
          "baseline_sizes: edge '" + eid +
          "' declares a baseline but its output depth is the compound "
          "expression " +
          expr.to_string());
    }
    declared[expr.vars.begin()->first].insert(e.baseline);
  }
  ConcreteSizes sizes;
  std::string missing;
  for (const auto& name : a.variables) {
    auto it = declared.find(name);
    if (it == declared.end()) {
      missing += missing.empty() ? name : (", " + name);
      continue;
    }
    if (it->second.size() > 1) {
      throw IncompatibilityError("baseline_sizes: variable '" + name +
                                 "' has conflicting baseline declarations");
    }
    sizes[name] = *it->second.begin();
  }
  if (!missing.empty()) {
    throw IncompatibilityError(
        "baseline_sizes: no baseline declared for variable(s): " + missing);
  }
  return sizes;
}

ConcreteSizes read_sizes_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) {
    throw FormatError("sizes '" + path + "': cannot open file");
  }
  ConcreteSizes sizes;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    std::istringstream in(line);
    std::string name;
    if (!(in >> name) || name[0] == '#') continue;
    long long value = 0;
    std::string extra;
    if (!(in >> value) || value < 1 || value > (1 << 24) ||
        (in >> extra && extra[0] != '#')) {
      throw FormatError("sizes '" + path + "' line " + std::to_string(line_no) +
                        ": expected '<variable> <width>'");
    }
    if (sizes.count(name)) {
      throw FormatError("sizes '" + path + "' line " + std::to_string(line_no) +
                        ": duplicate variable '" + name + "'");
    }
    sizes[name] = static_cast<int>(value);
  }
  if (sizes.empty()) {
    throw FormatError("sizes '" + path + "': no entries");
  }
  return sizes;
}

void write_sizes_file(const ConcreteSizes& sizes, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) {
    throw std::runtime_error("write_sizes_file: cannot open '" + path + "'");
  }
  f << "# channel widths\n";
  for (const auto& [name, value] : sizes) {
    f << name << " " << value << "\n";
  }
  if (!f) {
    throw std::runtime_error("write_sizes_file: write failed for '" + path +
                             "'");
  }
}

}  // namespace chanopt
