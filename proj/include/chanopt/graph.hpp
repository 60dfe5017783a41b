#pragma once

#include <map>
#include <string>
#include <vector>

namespace chanopt {

// How a node combines multiple inbound feature maps.
enum class CombineMode { kSingle, kSummation, kConcatenation };

// Edge kinds. Conv and pointwise edges may change channel depth and carry a
// channel variable; depthwise, skip, pool and other non-conv edges preserve
// depth and impose an equal-depth constraint between their endpoints.
enum class EdgeKind { kConv, kPointwise, kDepthwise, kSkip, kPool, kNonConv };

bool is_weight_bearing(EdgeKind k);   // conv, pointwise, depthwise
bool is_depth_changing(EdgeKind k);   // conv, pointwise

const char* edge_kind_name(EdgeKind k);
const char* combine_mode_name(CombineMode m);

struct GraphNode {
  std::string id;
  CombineMode combine = CombineMode::kSingle;
  // Source nodes only: the fixed input depth (e.g. 3 for RGB). 0 elsewhere.
  int input_depth = 0;
  // Optional reference width used to seed scaling commands. 0 = undeclared.
  int baseline = 0;
};

struct GraphEdge {
  std::string id;
  std::string tail;
  std::string head;
  EdgeKind kind = EdgeKind::kConv;
  int kh = 0;  // kernel height, weight-bearing kinds only
  int kw = 0;
  bool has_bias = false;
  bool has_batchnorm = false;
  int baseline = 0;  // optional reference width for this edge's output
};

// Directed acyclic multigraph of feature nodes and operation edges, plus an
// optional classifier head declaration.
class NetGraph {
 public:
  void add_node(GraphNode n);
  void add_edge(GraphEdge e);
  void set_head(const std::string& node_id, int num_classes);

  bool has_node(const std::string& id) const { return nodes_.count(id) > 0; }
  const GraphNode& node(const std::string& id) const;
  const GraphEdge& edge(const std::string& id) const;

  // Sorted by id; deterministic iteration everywhere.
  std::vector<std::string> node_ids() const;
  std::vector<std::string> edge_ids() const;
  const std::vector<std::string>& inbound(const std::string& node_id) const;
  const std::vector<std::string>& outbound(const std::string& node_id) const;

  bool has_head() const { return num_classes_ > 0; }
  const std::string& head_node() const { return head_node_; }
  int num_classes() const { return num_classes_; }

  // Gives every source node without a declared depth the given one (parsing
  // applies 3, the RGB default).
  void default_source_depth(int depth);

  // Structural checks: endpoints exist, no self loops, combine arities hold,
  // depth-preserving edges never enter a concatenation node, source nodes
  // carry the input depth, kernels are sane. Throws GraphError. Acyclicity is
  // checked by topo_queue.
  void validate() const;

 private:
  std::map<std::string, GraphNode> nodes_;
  std::map<std::string, GraphEdge> edges_;
  std::map<std::string, std::vector<std::string>> inbound_;
  std::map<std::string, std::vector<std::string>> outbound_;
  std::string head_node_;
  int num_classes_ = 0;
};

// Deterministic topological order: Kahn's algorithm, ties broken by lowest
// node id. Throws GraphError naming an edge on a cycle if the graph is not a
// DAG.
std::vector<std::string> topo_queue(const NetGraph& g);

// Text format:
//   nodes:
//     <id> [combine=single|sum|concat] [depth=<int>] [baseline=<int>]
//   edges:
//     <id> <tail> <head> <kind> [<KH>x<KW>] [bias] [bn] [baseline=<int>]
//   head:
//     node=<id> classes=<int>
// '#' starts a comment; blank lines are ignored. Kinds: conv, pointwise,
// depthwise, skip, pool, nonconv. conv/depthwise require a kernel; pointwise
// is implicitly 1x1. The parsed graph is validated (including acyclicity).
NetGraph parse_graph(const std::string& text, const std::string& source_name);
NetGraph load_graph_file(const std::string& path);

}  // namespace chanopt
