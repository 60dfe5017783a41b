#include <algorithm>
#include <map>
#include <stdexcept>

#include "chanopt/assignment.hpp"
#include "chanopt/errors.hpp"
#include "chanopt/graph.hpp"
#include "doctest.h"
#include "helpers.hpp"
#include "random_graphs.hpp"

using chanopt::ChannelAssignment;
using chanopt::ConcreteSizes;
using chanopt::ConstraintConflict;
using chanopt::LinearExpr;
using chanopt::NetGraph;
using chanopt::Rng;

namespace {

NetGraph load(const char* name) {
  return chanopt::load_graph_file(testutil::graph_path(name));
}

LinearExpr var(const std::string& v) {
  LinearExpr e;
  e.vars[v] = 1;
  return e;
}

LinearExpr constant(long long c) {
  LinearExpr e;
  e.constant = c;
  return e;
}

}  // namespace

TEST_SUITE("assignment") {
  TEST_CASE("chain: one variable per layer") {
    NetGraph g = load("chain3.graph");
    ChannelAssignment a = chanopt::assign_channels(g);
    CHECK(a.variables == std::vector<std::string>{"v0", "v1", "v2"});
    CHECK(a.node_depth.at("in") == constant(3));
    CHECK(a.node_depth.at("a") == var("v0"));
    CHECK(a.node_depth.at("b") == var("v1"));
    CHECK(a.node_depth.at("c") == var("v2"));
    CHECK(a.edge_out.at("c1") == var("v0"));
    CHECK(a.edge_out.at("c2") == var("v1"));
    CHECK(a.edge_out.at("c3") == var("v2"));
    auto groups = chanopt::layer_groups(g, a);
    CHECK(groups.at("v0") == std::vector<std::string>{"c1"});
    CHECK(groups.at("v1") == std::vector<std::string>{"c2"});
    CHECK(groups.at("v2") == std::vector<std::string>{"c3"});
  }

  TEST_CASE("skip and depthwise merge variables transitively") {
    NetGraph g = load("mixed.graph");
    ChannelAssignment a = chanopt::assign_channels(g);
    // a -> depthwise -> b -> pointwise -> c, plus skip a -> c: everything up
    // to d collapses onto one variable; the concatenation mints one per
    // branch.
    CHECK(a.variables == std::vector<std::string>{"v0", "v1", "v2"});
    CHECK(a.node_depth.at("a") == var("v0"));
    CHECK(a.node_depth.at("b") == var("v0"));
    CHECK(a.node_depth.at("c") == var("v0"));
    CHECK(a.node_depth.at("d") == var("v0"));
    LinearExpr joined;
    joined.vars["v1"] = 1;
    joined.vars["v2"] = 1;
    CHECK(a.node_depth.at("joined") == joined);
    CHECK(a.edge_out.at("e1") == var("v0"));
    CHECK(a.edge_out.at("e3") == var("v0"));
    CHECK(a.edge_out.count("e2") == 0);  // depthwise is depth-preserving
    CHECK(a.edge_out.count("e4") == 0);
    CHECK(a.edge_out.count("e5") == 0);
    auto groups = chanopt::layer_groups(g, a);
    CHECK(groups.at("v0") == std::vector<std::string>{"e1", "e3"});
    CHECK(groups.at("v1") == std::vector<std::string>{"e6"});
    CHECK(groups.at("v2") == std::vector<std::string>{"e7"});
  }

  TEST_CASE("concatenation depths add") {
    NetGraph g = load("cell2.graph");
    ChannelAssignment a = chanopt::assign_channels(g);
    REQUIRE(a.variables == std::vector<std::string>{"v0", "v1", "v2"});
    LinearExpr joined;
    joined.vars["v1"] = 1;
    joined.vars["v2"] = 1;
    CHECK(a.node_depth.at("joined") == joined);
    CHECK(a.node_depth.at("joined").to_string() == "v1 + v2");
    ConcreteSizes sizes = {{"v0", 16}, {"v1", 16}, {"v2", 8}};
    CHECK(chanopt::evaluate_depth(a.node_depth.at("joined"), sizes) == 24);
    CHECK(chanopt::validate_assignment(g, a, sizes).empty());
  }

  TEST_CASE("a skip out of a concatenation is absorbed by a lone variable") {
    // f's fresh variable must be eliminated in favour of the concatenated
    // sum flowing across the skip.
    const char* text = R"(
nodes:
n0 depth=3
m1
m2
cc combine=concat
d combine=sum
edges:
a1 n0 m1 conv 3x3
a2 n0 m2 conv 3x3
b1 m1 cc conv 3x3
b2 m2 cc conv 3x3
f n0 d conv 3x3
s cc d skip
)";
    NetGraph g = chanopt::parse_graph(text, "absorb");
    ChannelAssignment a = chanopt::assign_channels(g);
    CHECK(a.variables.size() == 4);
    CHECK(a.node_depth.at("d") == a.node_depth.at("cc"));
    CHECK(a.edge_out.at("f") == a.node_depth.at("cc"));
    CHECK(a.node_depth.at("d").vars.size() == 2);
    // The compound-output edge belongs to no layer group.
    auto groups = chanopt::layer_groups(g, a);
    for (const auto& [v, edges] : groups)
      CHECK(std::find(edges.begin(), edges.end(), "f") == edges.end());
    // And the result still validates under a binding.
    ConcreteSizes sizes;
    for (const auto& v : a.variables) sizes[v] = 5;
    CHECK(chanopt::validate_assignment(g, a, sizes).empty());
  }

  TEST_CASE("equating two concatenations is a constraint conflict") {
    // Two independent concatenations forced equal through a summation node:
    // va+vb = vc+vd has no lone variable left to absorb the residual.
    const char* text = R"(
nodes:
n0 depth=3
m1
m2
m3
m4
c1 combine=concat
c2 combine=concat
d combine=sum
edges:
a1 n0 m1 conv 3x3
a2 n0 m2 conv 3x3
a3 n0 m3 conv 3x3
a4 n0 m4 conv 3x3
b1 m1 c1 conv 3x3
b2 m2 c1 conv 3x3
b3 m3 c2 conv 3x3
b4 m4 c2 conv 3x3
s1 c1 d skip
s2 c2 d skip
)";
    CHECK_THROWS_AS(chanopt::assign_channels(chanopt::parse_graph(text, "x")),
                    ConstraintConflict);
  }

  TEST_CASE("summation branches are forced onto one variable") {
    const char* text = R"(
nodes:
n0 depth=3
l
r
s combine=sum
edges:
el n0 l conv 3x3
er n0 r conv 3x3
fl l s conv 3x3
fr r s conv 3x3
)";
    NetGraph g = chanopt::parse_graph(text, "sum");
    ChannelAssignment a = chanopt::assign_channels(g);
    // l and r stay independent; the summation node is one fresh variable
    // shared by both inbound convolutions.
    CHECK(a.variables.size() == 3);
    CHECK(a.edge_out.at("fl") == a.edge_out.at("fr"));
    CHECK(a.edge_out.at("fl") == a.node_depth.at("s"));
    auto groups = chanopt::layer_groups(g, a);
    CHECK(groups.at(a.node_depth.at("s").vars.begin()->first) ==
          std::vector<std::string>{"fl", "fr"});
  }

  TEST_CASE("resnet34 resolves to 20 variables and the known param count") {
    NetGraph g = load("resnet34_cifar.graph");
    ChannelAssignment a = chanopt::assign_channels(g);
    CHECK(a.variables.size() == 20);
    ConcreteSizes sizes = chanopt::baseline_sizes(g, a);
    CHECK(chanopt::validate_assignment(g, a, sizes).empty());
    CHECK(chanopt::param_count(g, a, sizes) == 21282122);
  }

  TEST_CASE("evaluate_depth") {
    LinearExpr e;
    e.vars["v0"] = 1;
    e.vars["v3"] = 2;
    e.constant = 5;
    ConcreteSizes sizes = {{"v0", 4}, {"v3", 7}};
    CHECK(chanopt::evaluate_depth(e, sizes) == 4 + 14 + 5);
    CHECK(e.to_string() == "v0 + 2*v3 + 5");
    CHECK_THROWS_AS(chanopt::evaluate_depth(e, {{"v0", 4}}),
                    chanopt::IncompatibilityError);
    CHECK_THROWS_AS(chanopt::evaluate_depth(e, {{"v0", 0}, {"v3", 7}}),
                    std::invalid_argument);
  }

  TEST_CASE("param_count oracles, hand-computed") {
    {
      NetGraph g = load("chain3.graph");
      ChannelAssignment a = chanopt::assign_channels(g);
      ConcreteSizes sizes = chanopt::uniform_sizes(a, 16);
      // 3 convs with bias (448 + 2320 + 2320) plus a 16-class head (272).
      CHECK(chanopt::param_count(g, a, sizes) == 5360);
    }
    {
      NetGraph g = load("mixed.graph");
      ChannelAssignment a = chanopt::assign_channels(g);
      ConcreteSizes sizes = {{"v0", 4}, {"v1", 3}, {"v2", 2}};
      // conv 112 + depthwise 40 + pointwise 20 + convs 111 and 74 + head 60.
      CHECK(chanopt::param_count(g, a, sizes) == 417);
    }
    {
      NetGraph g = load("cell2.graph");
      ChannelAssignment a = chanopt::assign_channels(g);
      CHECK(chanopt::param_count(g, a, chanopt::baseline_sizes(g, a)) == 3154);
    }
  }

  TEST_CASE("batchnorm adds two parameters per output channel") {
    NetGraph with_bn = chanopt::parse_graph(
        "nodes:\nn0 depth=3\na\nedges:\ne n0 a conv 3x3 bn\n", "bn");
    NetGraph without = chanopt::parse_graph(
        "nodes:\nn0 depth=3\na\nedges:\ne n0 a conv 3x3\n", "plain");
    auto ab = chanopt::assign_channels(with_bn);
    auto ap = chanopt::assign_channels(without);
    ConcreteSizes sizes = {{"v0", 10}};
    CHECK(chanopt::param_count(with_bn, ab, sizes) -
              chanopt::param_count(without, ap, sizes) ==
          20);
  }

  TEST_CASE("param_count is monotone in every variable") {
    Rng rng(71);
    for (int iter = 0; iter < 10; ++iter) {
      auto [g, a] = testutil::satisfiable_dag(rng, 15);
      ConcreteSizes sizes;
      for (const auto& v : a.variables)
        sizes[v] = 1 + static_cast<int>(rng.next_below(16));
      long long base = chanopt::param_count(g, a, sizes);
      for (const auto& v : a.variables) {
        ConcreteSizes bigger = sizes;
        bigger[v] += 3;
        CHECK(chanopt::param_count(g, a, bigger) >= base);
      }
    }
  }

  TEST_CASE("validate_concrete flags a planted fault") {
    NetGraph g = load("chain3.graph");
    ChannelAssignment a = chanopt::assign_channels(g);
    ConcreteSizes sizes = {{"v0", 5}, {"v1", 7}, {"v2", 9}};
    std::map<std::string, long long> nodes, edges;
    for (const auto& [n, e] : a.node_depth)
      nodes[n] = chanopt::evaluate_depth(e, sizes);
    for (const auto& [id, e] : a.edge_out)
      edges[id] = chanopt::evaluate_depth(e, sizes);
    CHECK(chanopt::validate_concrete(g, nodes, edges).empty());
    auto faulty = nodes;
    faulty["b"] = 8;
    auto issues = chanopt::validate_concrete(g, faulty, edges);
    REQUIRE_FALSE(issues.empty());
    bool names_b = false;
    for (const auto& i : issues)
      names_b |= i.subject == "b" || i.message.find("b") != std::string::npos ||
                 i.subject == "c2";
    CHECK(names_b);
  }

  TEST_CASE("soundness on random DAGs") {
    Rng rng(72);
    for (int iter = 0; iter < 25; ++iter) {
      auto [g, a] = testutil::satisfiable_dag(rng);
      // Determinism: a second pass gives the identical assignment.
      ChannelAssignment again = chanopt::assign_channels(g);
      CHECK(again.variables == a.variables);
      CHECK(again.node_depth == a.node_depth);
      CHECK(again.edge_out == a.edge_out);
      for (int binding = 0; binding < 5; ++binding) {
        ConcreteSizes sizes;
        for (const auto& v : a.variables)
          sizes[v] = 1 + static_cast<int>(rng.next_below(64));
        auto issues = chanopt::validate_assignment(g, a, sizes);
        CHECK(issues.empty());
      }
    }
  }

  TEST_CASE("maximality: merging variables still validates, splitting breaks") {
    Rng rng(73);
    int split_checks = 0;
    for (int iter = 0; iter < 10; ++iter) {
      auto [g, a] = testutil::satisfiable_dag(rng);
      ConcreteSizes sizes;
      for (const auto& v : a.variables)
        sizes[v] = 2 + static_cast<int>(rng.next_below(32));

      // Merging two independent variables (binding them equal) never hurts.
      if (a.variables.size() >= 2) {
        ConcreteSizes merged = sizes;
        merged[a.variables[1]] = merged[a.variables[0]];
        CHECK(chanopt::validate_assignment(g, a, merged).empty());
      }

      // Splitting across any depth-preserving edge must be flagged.
      std::map<std::string, long long> nodes, edges;
      for (const auto& [n, e] : a.node_depth)
        nodes[n] = chanopt::evaluate_depth(e, sizes);
      for (const auto& [id, e] : a.edge_out)
        edges[id] = chanopt::evaluate_depth(e, sizes);
      for (const auto& eid : g.edge_ids()) {
        if (chanopt::is_depth_changing(g.edge(eid).kind)) continue;
        auto faulty = nodes;
        faulty[g.edge(eid).head] += 1;
        CHECK_FALSE(chanopt::validate_concrete(g, faulty, edges).empty());
        ++split_checks;
        if (split_checks >= 20) break;
      }
    }
    CHECK(split_checks > 0);
  }

  TEST_CASE("baseline sizes come from declarations and must agree") {
    NetGraph g = load("mixed.graph");
    ChannelAssignment a = chanopt::assign_channels(g);
    ConcreteSizes sizes = chanopt::baseline_sizes(g, a);
    CHECK(sizes == ConcreteSizes{{"v0", 12}, {"v1", 10}, {"v2", 6}});
    // A graph without declarations cannot provide baselines.
    NetGraph bare = chanopt::parse_graph(
        "nodes:\nn0 depth=3\na\nedges:\ne n0 a conv 3x3\n", "bare");
    auto ab = chanopt::assign_channels(bare);
    CHECK_THROWS_AS(chanopt::baseline_sizes(bare, ab),
                    chanopt::IncompatibilityError);
  }

  TEST_CASE("uniform sizes cover every variable") {
    NetGraph g = load("cell2.graph");
    ChannelAssignment a = chanopt::assign_channels(g);
    ConcreteSizes sizes = chanopt::uniform_sizes(a, 9);
    CHECK(sizes.size() == a.variables.size());
    for (const auto& [v, s] : sizes) CHECK(s == 9);
  }

  TEST_CASE("sizes files round trip and reject garbage") {
    auto dir = testutil::fresh_dir("sizes");
    ConcreteSizes sizes = {{"v0", 3}, {"v1", 44}, {"v10", 7}};
    chanopt::write_sizes_file(sizes, dir + "/s.txt");
    CHECK(chanopt::read_sizes_file(dir + "/s.txt") == sizes);
    std::ofstream(dir + "/bad.txt") << "v0 3\nv1 not_a_number\n";
    CHECK_THROWS_AS(chanopt::read_sizes_file(dir + "/bad.txt"),
                    chanopt::FormatError);
    std::ofstream(dir + "/dup.txt") << "v0 3\nv0 4\n";
    CHECK_THROWS_AS(chanopt::read_sizes_file(dir + "/dup.txt"),
                    chanopt::FormatError);
    CHECK_THROWS_AS(chanopt::read_sizes_file(dir + "/missing.txt"),
                    chanopt::FormatError);
  }
}
