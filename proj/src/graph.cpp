#include "chanopt/graph.hpp"

#include <algorithm>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>

#include "chanopt/errors.hpp"

namespace chanopt {

bool is_weight_bearing(EdgeKind k) {
  return k == EdgeKind::kConv || k == EdgeKind::kPointwise ||
         k == EdgeKind::kDepthwise;
}

bool is_depth_changing(EdgeKind k) {
  return k == EdgeKind::kConv || k == EdgeKind::kPointwise;
}

const char* edge_kind_name(EdgeKind k) {
  switch (k) {
    case EdgeKind::kConv: return "conv";
    case EdgeKind::kPointwise: return "pointwise";
    case EdgeKind::kDepthwise: return "depthwise";
    case EdgeKind::kSkip: return "skip";
    case EdgeKind::kPool: return "pool";
    case EdgeKind::kNonConv: return "nonconv";
  }
  return "?";
}

const char* combine_mode_name(CombineMode m) {
  switch (m) {
    case CombineMode::kSingle: return "single";
    case CombineMode::kSummation: return "sum";
    case CombineMode::kConcatenation: return "concat";
  }
  return "?";
}

void NetGraph::add_node(GraphNode n) {
  if (n.id.empty()) throw GraphError("graph: empty node id");
  if (nodes_.count(n.id)) throw GraphError("graph: duplicate node '" + n.id + "'");
  inbound_[n.id];
  outbound_[n.id];
  nodes_.emplace(n.id, std::move(n));
}

void NetGraph::add_edge(GraphEdge e) {
  if (e.id.empty()) throw GraphError("graph: empty edge id");
  if (edges_.count(e.id)) throw GraphError("graph: duplicate edge '" + e.id + "'");
  inbound_[e.head].push_back(e.id);
  outbound_[e.tail].push_back(e.id);
  std::sort(inbound_[e.head].begin(), inbound_[e.head].end());
  std::sort(outbound_[e.tail].begin(), outbound_[e.tail].end());
  edges_.emplace(e.id, std::move(e));
}

void NetGraph::default_source_depth(int depth) {
  for (auto& [id, n] : nodes_) {
    if (inbound_.at(id).empty() && n.input_depth == 0) {
      n.input_depth = depth;
    }
  }
}

void NetGraph::set_head(const std::string& node_id, int num_classes) {
  if (num_classes < 2) {
    throw GraphError("graph: head needs at least 2 classes");
  }
  head_node_ = node_id;
  num_classes_ = num_classes;
}

const GraphNode& NetGraph::node(const std::string& id) const {
  auto it = nodes_.find(id);
  if (it == nodes_.end()) throw GraphError("graph: unknown node '" + id + "'");
  return it->second;
}

const GraphEdge& NetGraph::edge(const std::string& id) const {
  auto it = edges_.find(id);
  if (it == edges_.end()) throw GraphError("graph: unknown edge '" + id + "'");
  return it->second;
}

std::vector<std::string> NetGraph::node_ids() const {
  std::vector<std::string> ids;
  ids.reserve(nodes_.size());
  for (const auto& [id, _] : nodes_) ids.push_back(id);
  return ids;
}

std::vector<std::string> NetGraph::edge_ids() const {
  std::vector<std::string> ids;
  ids.reserve(edges_.size());
  for (const auto& [id, _] : edges_) ids.push_back(id);
  return ids;
}

const std::vector<std::string>& NetGraph::inbound(
    const std::string& node_id) const {
  auto it = inbound_.find(node_id);
  if (it == inbound_.end()) throw GraphError("graph: unknown node '" + node_id + "'");
  return it->second;
}

const std::vector<std::string>& NetGraph::outbound(
    const std::string& node_id) const {
  auto it = outbound_.find(node_id);
  if (it == outbound_.end()) throw GraphError("graph: unknown node '" + node_id + "'");
  return it->second;
}

void NetGraph::validate() const {
  if (nodes_.empty()) throw GraphError("graph: no nodes");
  for (const auto& [id, e] : edges_) {
    if (!nodes_.count(e.tail)) {
      throw GraphError("graph: edge '" + id + "' tail '" + e.tail +
                       "' is not a node");
    }
    if (!nodes_.count(e.head)) {
      throw GraphError("graph: edge '" + id + "' head '" + e.head +
                       "' is not a node");
    }
    if (e.tail == e.head) {
      throw GraphError("graph: edge '" + id + "' is a self loop");
    }
    if (is_weight_bearing(e.kind)) {
      if (e.kh < 1 || e.kw < 1) {
        throw GraphError("graph: edge '" + id + "' needs a kernel");
      }
      if (e.kind == EdgeKind::kPointwise && (e.kh != 1 || e.kw != 1)) {
        throw GraphError("graph: pointwise edge '" + id + "' must be 1x1");
      }
    } else {
      if (e.kh != 0 || e.kw != 0 || e.has_bias || e.has_batchnorm) {
        throw GraphError("graph: non-weight edge '" + id +
                         "' cannot carry kernel, bias or batchnorm");
      }
    }
    if (!is_depth_changing(e.kind) &&
        node(e.head).combine == CombineMode::kConcatenation) {
      throw GraphError(
          "graph: depth-preserving edge '" + id +
          "' cannot enter concatenation node '" + e.head +
          "' (its depth would have to equal the concatenated total)");
    }
    if (e.baseline < 0) {
      throw GraphError("graph: edge '" + id + "' negative baseline");
    }
  }
  for (const auto& [id, n] : nodes_) {
    const std::size_t fan_in = inbound_.at(id).size();
    switch (n.combine) {
      case CombineMode::kSingle:
        if (fan_in > 1) {
          throw GraphError("graph: node '" + id +
                           "' has multiple inbound edges but no combine mode");
        }
        break;
      case CombineMode::kSummation:
        if (fan_in < 1) {
          throw GraphError("graph: summation node '" + id +
                           "' has no inbound edges");
        }
        break;
      case CombineMode::kConcatenation:
        if (fan_in < 2) {
          throw GraphError("graph: concatenation node '" + id +
                           "' needs at least 2 inbound edges");
        }
        break;
    }
    if (fan_in == 0) {
      if (n.input_depth < 1) {
        throw GraphError("graph: source node '" + id +
                         "' needs a positive input depth");
      }
    } else if (n.input_depth != 0) {
      throw GraphError("graph: node '" + id +
                       "' declares an input depth but has inbound edges");
    }
    if (n.baseline < 0) {
      throw GraphError("graph: node '" + id + "' negative baseline");
    }
  }
  if (num_classes_ > 0 && !nodes_.count(head_node_)) {
    throw GraphError("graph: head node '" + head_node_ + "' is not a node");
  }
}

std::vector<std::string> topo_queue(const NetGraph& g) {
  std::map<std::string, int> in_degree;
  for (const auto& id : g.node_ids()) {
    in_degree[id] = static_cast<int>(g.inbound(id).size());
  }
  // Min-heap on node id: among ready nodes the lowest id is pulled first.
  std::priority_queue<std::string, std::vector<std::string>, std::greater<>> ready;
  for (const auto& [id, deg] : in_degree) {
    if (deg == 0) ready.push(id);
  }
  std::vector<std::string> order;
  order.reserve(in_degree.size());
  while (!ready.empty()) {
    const std::string id = ready.top();
    ready.pop();
    order.push_back(id);
    for (const auto& eid : g.outbound(id)) {
      const auto& e = g.edge(eid);
      if (--in_degree[e.head] == 0) ready.push(e.head);
    }
  }
  if (order.size() != in_degree.size()) {
    // Find one edge on a cycle among the unprocessed remainder for the error.
    std::set<std::string> stuck;
    for (const auto& [id, deg] : in_degree) {
      if (deg > 0) stuck.insert(id);
    }
    for (const auto& id : stuck) {
      for (const auto& eid : g.outbound(id)) {
        if (stuck.count(g.edge(eid).head)) {
          throw GraphError("graph: cycle detected through edge '" + eid + "'");
        }
      }
    }
    throw GraphError("graph: cycle detected");
  }
  return order;
}

namespace {

std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> toks;
  std::istringstream in(line);
  std::string t;
  while (in >> t) {
    if (t[0] == '#') break;
    toks.push_back(t);
  }
  return toks;
}

int parse_positive_int(const std::string& text, const std::string& what,
                       const std::string& source, int line_no) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(text, &used);
    if (used != text.size() || v < 1) throw std::invalid_argument("range");
    return v;
  } catch (const std::exception&) {
    throw FormatError("graph '" + source + "' line " + std::to_string(line_no) +
                      ": bad " + what + " '" + text + "'");
  }
}

}  // namespace

NetGraph parse_graph(const std::string& text, const std::string& source_name) {
  NetGraph g;
  enum class Section { kNone, kNodes, kEdges, kHead } section = Section::kNone;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  bool saw_any = false;
  while (std::getline(in, line)) {
    ++line_no;
    const auto toks = tokenize(line);
    if (toks.empty()) continue;
    if (toks.size() == 1 && toks[0].back() == ':') {
      const std::string name = toks[0].substr(0, toks[0].size() - 1);
      if (name == "nodes") {
        section = Section::kNodes;
      } else if (name == "edges") {
        section = Section::kEdges;
      } else if (name == "head") {
        section = Section::kHead;
      } else {
        throw FormatError("graph '" + source_name + "' line " +
                          std::to_string(line_no) + ": unknown section '" +
                          name + "'");
      }
      saw_any = true;
      continue;
    }
    auto fail = [&](const std::string& msg) -> FormatError {
      return FormatError("graph '" + source_name + "' line " +
                         std::to_string(line_no) + ": " + msg);
    };
    switch (section) {
      case Section::kNone:
        throw fail("content before any section header");
      case Section::kNodes: {
        GraphNode n;
        n.id = toks[0];
        for (std::size_t i = 1; i < toks.size(); ++i) {
          const std::string& t = toks[i];
          if (t.rfind("combine=", 0) == 0) {
            const std::string m = t.substr(8);
            if (m == "single") {
              n.combine = CombineMode::kSingle;
            } else if (m == "sum") {
              n.combine = CombineMode::kSummation;
            } else if (m == "concat") {
              n.combine = CombineMode::kConcatenation;
            } else {
              throw fail("unknown combine mode '" + m + "'");
            }
          } else if (t.rfind("depth=", 0) == 0) {
            n.input_depth =
                parse_positive_int(t.substr(6), "depth", source_name, line_no);
          } else if (t.rfind("baseline=", 0) == 0) {
            n.baseline = parse_positive_int(t.substr(9), "baseline",
                                            source_name, line_no);
          } else {
            throw fail("unknown node attribute '" + t + "'");
          }
        }
        try {
          g.add_node(std::move(n));
        } catch (const GraphError& e) {
          throw fail(e.what());
        }
        break;
      }
      case Section::kEdges: {
        if (toks.size() < 4) {
          throw fail("edge needs: <id> <tail> <head> <kind> ...");
        }
        GraphEdge e;
        e.id = toks[0];
        e.tail = toks[1];
        e.head = toks[2];
        const std::string& kind = toks[3];
        if (kind == "conv") {
          e.kind = EdgeKind::kConv;
        } else if (kind == "pointwise") {
          e.kind = EdgeKind::kPointwise;
          e.kh = e.kw = 1;
        } else if (kind == "depthwise") {
          e.kind = EdgeKind::kDepthwise;
        } else if (kind == "skip") {
          e.kind = EdgeKind::kSkip;
        } else if (kind == "pool") {
          e.kind = EdgeKind::kPool;
        } else if (kind == "nonconv") {
          e.kind = EdgeKind::kNonConv;
        } else {
          throw fail("unknown edge kind '" + kind + "'");
        }
        for (std::size_t i = 4; i < toks.size(); ++i) {
          const std::string& t = toks[i];
          const std::size_t x = t.find('x');
          if (t == "bias") {
            e.has_bias = true;
          } else if (t == "bn") {
            e.has_batchnorm = true;
          } else if (t.rfind("baseline=", 0) == 0) {
            e.baseline = parse_positive_int(t.substr(9), "baseline",
                                            source_name, line_no);
          } else if (x != std::string::npos && x > 0 && x + 1 < t.size()) {
            e.kh = parse_positive_int(t.substr(0, x), "kernel", source_name,
                                      line_no);
            e.kw = parse_positive_int(t.substr(x + 1), "kernel", source_name,
                                      line_no);
          } else {
            throw fail("unknown edge attribute '" + t + "'");
          }
        }
        try {
          g.add_edge(std::move(e));
        } catch (const GraphError& err) {
          throw fail(err.what());
        }
        break;
      }
      case Section::kHead: {
        std::string node;
        int classes = 0;
        for (const auto& t : toks) {
          if (t.rfind("node=", 0) == 0) {
            node = t.substr(5);
          } else if (t.rfind("classes=", 0) == 0) {
            classes = parse_positive_int(t.substr(8), "classes", source_name,
                                         line_no);
          } else {
            throw fail("unknown head attribute '" + t + "'");
          }
        }
        if (node.empty() || classes == 0) {
          throw fail("head needs node=<id> classes=<n>");
        }
        try {
          g.set_head(node, classes);
        } catch (const GraphError& err) {
          throw fail(err.what());
        }
        break;
      }
    }
    saw_any = true;
  }
  if (!saw_any) {
    throw FormatError("graph '" + source_name + "': empty input");
  }
  g.default_source_depth(3);
  try {
    g.validate();
    topo_queue(g);
  } catch (const GraphError& e) {
    throw FormatError("graph '" + source_name + "': " + e.what());
  }
  return g;
}

NetGraph load_graph_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) {
    throw FormatError("graph '" + path + "': cannot open file");
  }
  std::string text((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  return parse_graph(text, path);
}

}  // namespace chanopt
