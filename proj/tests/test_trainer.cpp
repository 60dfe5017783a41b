#include <algorithm>
#include <cmath>
#include <numeric>

#include "chanopt/assignment.hpp"
#include "chanopt/errors.hpp"
#include "chanopt/graph.hpp"
#include "chanopt/snapshot.hpp"
#include "chanopt/trainer.hpp"
#include "doctest.h"
#include "helpers.hpp"

using chanopt::ChannelAssignment;
using chanopt::ConcreteSizes;
using chanopt::ConvNetModel;
using chanopt::Dataset;
using chanopt::NetGraph;
using chanopt::SnapshotArchive;
using chanopt::TrainerConfig;

namespace {

struct Setup {
  NetGraph g;
  ChannelAssignment a;
  ConcreteSizes sizes;
};

Setup load(const char* name, int width) {
  Setup s{chanopt::load_graph_file(testutil::graph_path(name)), {}, {}};
  s.a = chanopt::assign_channels(s.g);
  s.sizes = chanopt::uniform_sizes(s.a, width);
  return s;
}

TrainerConfig small_config() {
  TrainerConfig c;
  c.dataset.samples = 64;
  c.dataset.num_classes = 16;
  c.batch_size = 16;
  c.seed = 5;
  return c;
}

bool archives_equal(const SnapshotArchive& x, const SnapshotArchive& y,
                    int x_from = 0) {
  if (y.epoch_count() + x_from > x.epoch_count()) return false;
  for (int e = 0; e < y.epoch_count(); ++e) {
    for (const auto& name : y.layer_names) {
      if (x.tensor(e + x_from, name).values() != y.tensor(e, name).values())
        return false;
    }
    if (x.train_loss[e + x_from] != y.train_loss[e]) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("synthetic dataset is deterministic and balanced") {
    chanopt::DatasetConfig dc;
    dc.samples = 40;
    dc.num_classes = 10;
    Dataset d1 = chanopt::make_dataset(dc, 7);
    Dataset d2 = chanopt::make_dataset(dc, 7);
    CHECK(d1.images == d2.images);
    CHECK(d1.labels == d2.labels);
    Dataset d3 = chanopt::make_dataset(dc, 8);
    CHECK(d1.images != d3.images);
    // Round-robin labels: every class appears samples/classes times.
    std::vector<int> counts(10, 0);
    for (int l : d1.labels) counts[l]++;
    for (int c : counts) CHECK(c == 4);
    CHECK(d1.images.size() ==
          static_cast<std::size_t>(40 * 8 * 8 * 3));
  }

  TEST_CASE("training runs are bit-identical given the seed") {
    Setup s = load("conv2.graph", 6);
    TrainerConfig c = small_config();
    ConvNetModel m1(s.g, s.a, s.sizes, 11);
    ConvNetModel m2(s.g, s.a, s.sizes, 11);
    SnapshotArchive a1 = chanopt::train_epochs(m1, c, 3);
    SnapshotArchive a2 = chanopt::train_epochs(m2, c, 3);
    REQUIRE(a1.epoch_count() == 3);
    CHECK(archives_equal(a1, a2));
    CHECK(a1.train_loss == a2.train_loss);
  }

  TEST_CASE("splitting epochs across calls does not change the trajectory") {
    Setup s = load("conv2.graph", 6);
    TrainerConfig c = small_config();
    ConvNetModel whole(s.g, s.a, s.sizes, 11);
    SnapshotArchive full = chanopt::train_epochs(whole, c, 4);

    ConvNetModel split(s.g, s.a, s.sizes, 11);
    SnapshotArchive first = chanopt::train_epochs(split, c, 2);
    SnapshotArchive second = chanopt::train_epochs(split, c, 2);
    CHECK(split.epochs_trained() == 4);
    CHECK(archives_equal(full, first, 0));
    CHECK(archives_equal(full, second, 2));
  }

  TEST_CASE("zero learning rate is a fixed point") {
    Setup s = load("conv2.graph", 5);
    TrainerConfig c = small_config();
    c.learning_rate = 0.0;
    ConvNetModel m(s.g, s.a, s.sizes, 3);
    std::map<std::string, chanopt::ConvTensor> init;
    for (const auto& id : m.layer_ids())
      init[id] = chanopt::quantize_to_f32(m.layer_tensor(id));
    SnapshotArchive a = chanopt::train_epochs(m, c, 2);
    for (int e = 0; e < 2; ++e)
      for (const auto& id : m.layer_ids())
        CHECK(a.tensor(e, id).values() == init[id].values());
  }

  TEST_CASE("loss decreases on the shipped smoke setup") {
    Setup s = load("chain3.graph", 8);
    TrainerConfig c;  // shipped defaults: 512 samples, 16 classes
    c.seed = 1;
    ConvNetModel m(s.g, s.a, s.sizes, 1);
    std::vector<double> acc;
    SnapshotArchive a = chanopt::train_epochs(m, c, 6, &acc);
    REQUIRE(a.train_loss.size() == 6u);
    REQUIRE(acc.size() == 6u);
    // Allow one transient increase, require a clear overall drop.
    int increases = 0;
    for (int e = 1; e < 6; ++e)
      if (a.train_loss[e] > a.train_loss[e - 1]) ++increases;
    CHECK(increases <= 1);
    CHECK(a.train_loss.back() < 0.5 * a.train_loss.front());
    CHECK(acc.back() > acc.front());
    for (double x : acc) {
      CHECK(x >= 0.0);
      CHECK(x <= 1.0);
    }
  }

  TEST_CASE("snapshots are float32-quantized at capture") {
    Setup s = load("conv2.graph", 4);
    TrainerConfig c = small_config();
    ConvNetModel m(s.g, s.a, s.sizes, 2);
    SnapshotArchive a = chanopt::train_epochs(m, c, 1);
    for (const auto& id : m.layer_ids()) {
      const auto& t = a.tensor(0, id);
      chanopt::ConvTensor q = chanopt::quantize_to_f32(t);
      CHECK(q.values() == t.values());
    }
  }

  TEST_CASE("analytic gradients match central differences everywhere") {
    // mixed.graph covers conv, depthwise, pointwise, skip, pool, summation
    // and concatenation in one backward pass.
    Setup s = load("mixed.graph", 3);
    ConvNetModel m(s.g, s.a, s.sizes, 9);
    chanopt::DatasetConfig dc;
    dc.samples = 8;
    dc.num_classes = 10;
    Dataset data = chanopt::make_dataset(dc, 21);
    std::vector<int> batch = {0, 3, 5, 6};

    std::vector<double> analytic = m.batch_gradients(data, batch);
    REQUIRE(analytic.size() == m.num_parameters());
    const double h = 1e-5;
    int checked = 0;
    for (std::size_t i = 0; i < m.num_parameters();
         i += std::max<std::size_t>(1, m.num_parameters() / 120)) {
      double saved = m.parameter(i);
      m.parameter(i) = saved + h;
      double up = m.batch_loss(data, batch);
      m.parameter(i) = saved - h;
      double down = m.batch_loss(data, batch);
      m.parameter(i) = saved;
      double numeric = (up - down) / (2 * h);
      CHECK(std::abs(analytic[i] - numeric) <=
            1e-4 * std::max({1.0, std::abs(analytic[i]), std::abs(numeric)}));
      ++checked;
    }
    CHECK(checked >= 100);
  }

  TEST_CASE("per-layer learning-rate scales are honored") {
    Setup s = load("conv2.graph", 5);
    TrainerConfig c = small_config();
    c.layer_lr_scale["c1"] = 0.0;  // freeze the first conv
    ConvNetModel m(s.g, s.a, s.sizes, 3);
    chanopt::ConvTensor before = chanopt::quantize_to_f32(m.layer_tensor("c1"));
    chanopt::ConvTensor before2 = chanopt::quantize_to_f32(m.layer_tensor("c2"));
    SnapshotArchive a = chanopt::train_epochs(m, c, 2);
    CHECK(a.tensor(1, "c1").values() == before.values());
    CHECK(a.tensor(1, "c2").values() != before2.values());
    // Unknown layer ids are rejected.
    TrainerConfig bad = small_config();
    bad.layer_lr_scale["zz"] = 0.5;
    ConvNetModel m2(s.g, s.a, s.sizes, 3);
    CHECK_THROWS_AS(chanopt::train_epochs(m2, bad, 1), std::invalid_argument);
  }

  TEST_CASE("config and size mismatches are rejected") {
    Setup s = load("conv2.graph", 5);
    // Dataset channels must match the source depth.
    TrainerConfig c = small_config();
    c.dataset.channels = 4;
    ConvNetModel m(s.g, s.a, s.sizes, 3);
    CHECK_THROWS_AS(chanopt::train_epochs(m, c, 1),
                    chanopt::IncompatibilityError);
    // Dataset classes must match the head.
    TrainerConfig c2 = small_config();
    c2.dataset.num_classes = 7;
    CHECK_THROWS_AS(chanopt::train_epochs(m, c2, 1),
                    chanopt::IncompatibilityError);
    // Sizes that violate the assignment never build.
    ConcreteSizes bad = s.sizes;
    bad.erase(bad.begin());
    CHECK_THROWS_AS(ConvNetModel(s.g, s.a, bad, 1),
                    chanopt::IncompatibilityError);
    // Negative learning rate is rejected.
    TrainerConfig c3 = small_config();
    c3.learning_rate = -0.1;
    CHECK_THROWS_AS(chanopt::train_epochs(m, c3, 1), std::invalid_argument);
  }

  TEST_CASE("even kernels cannot train") {
    NetGraph g = chanopt::parse_graph(
        "nodes:\nin depth=3\na\nedges:\ne in a conv 2x2\nhead:\nnode=a "
        "classes=4\n",
        "even");
    ChannelAssignment a = chanopt::assign_channels(g);
    CHECK_THROWS(ConvNetModel(g, a, chanopt::uniform_sizes(a, 4), 1));
  }

  TEST_CASE("archive metrics cover exactly the depth-changing edges") {
    Setup s = load("mixed.graph", 4);
    TrainerConfig c = small_config();
    c.dataset.num_classes = 10;
    ConvNetModel m(s.g, s.a, s.sizes, 7);
    SnapshotArchive a = chanopt::train_epochs(m, c, 2);
    // The archive snapshots every weight-bearing edge...
    CHECK(a.layer_names ==
          std::vector<std::string>{"e1", "e2", "e3", "e6", "e7"});
    // ...but metrics only analyze conv/pointwise ones.
    chanopt::TrialMetrics tm = chanopt::metrics_from_archive(a, s.g);
    CHECK(tm.per_edge.size() == 4u);
    CHECK(tm.per_edge.count("e2") == 0);  // depthwise is excluded
    for (const auto& [edge, hist] : tm.per_edge)
      CHECK(hist.epoch_count() == 2);
    CHECK(tm.train_loss == a.train_loss);
  }

  TEST_CASE("snapshot archives replay as a trial runner") {
    Setup s = load("conv2.graph", 6);
    TrainerConfig c = small_config();
    ConvNetModel m(s.g, s.a, s.sizes, 11);
    SnapshotArchive a = chanopt::train_epochs(m, c, 4);
    auto dir = testutil::fresh_dir("replay");
    chanopt::write_snapshot_archive(a, dir + "/run.snap");
    SnapshotArchive loaded = chanopt::read_snapshot_archive(dir + "/run.snap");

    chanopt::ReplayTrialRunner runner(s.g, loaded);
    chanopt::TrialMetrics t1 = runner.run_trial(s.sizes, 2, 0);
    chanopt::TrialMetrics t2 = runner.run_trial(s.sizes, 2, 1);
    chanopt::TrialMetrics direct = chanopt::metrics_from_archive(a, s.g);
    for (const auto& [edge, hist] : t1.per_edge) {
      REQUIRE(hist.epoch_count() == 2);
      for (int e = 0; e < 2; ++e) {
        CHECK(hist.epochs[e].rank_avg ==
              direct.per_edge.at(edge).epochs[e].rank_avg);
        CHECK(t2.per_edge.at(edge).epochs[e].rank_avg ==
              direct.per_edge.at(edge).epochs[e + 2].rank_avg);
      }
    }
    // A third window runs off the end of the archive.
    CHECK_THROWS_AS(runner.run_trial(s.sizes, 2, 2), chanopt::TrainerFailure);
    // Requesting sizes that disagree with the stored dims is refused.
    chanopt::ReplayTrialRunner fresh(s.g, loaded);
    CHECK_THROWS_AS(fresh.run_trial(chanopt::uniform_sizes(s.a, 7), 2, 0),
                    chanopt::IncompatibilityError);
  }

  TEST_CASE("the sgd trial runner reseeds per trial and reports accuracy") {
    Setup s = load("conv2.graph", 5);
    TrainerConfig c = small_config();
    chanopt::SgdTrialRunner runner(s.g, s.a, c);
    int sink_calls = 0;
    runner.set_archive_sink([&](int trial, const SnapshotArchive& a,
                                const std::vector<double>& acc) {
      CHECK(trial == sink_calls);
      CHECK(a.epoch_count() == 2);
      CHECK(acc.size() == 2u);
      ++sink_calls;
    });
    chanopt::TrialMetrics t0 = runner.run_trial(s.sizes, 2, 0);
    chanopt::TrialMetrics t0_again = runner.run_trial(s.sizes, 2, 0);
    chanopt::TrialMetrics t1 = runner.run_trial(s.sizes, 2, 1);
    CHECK(sink_calls == 3);
    // Same trial index: identical metrics. Different index: fresh init.
    bool same = true, differ = false;
    for (const auto& [edge, hist] : t0.per_edge) {
      for (int e = 0; e < hist.epoch_count(); ++e) {
        same &= hist.epochs[e].rank_avg ==
                t0_again.per_edge.at(edge).epochs[e].rank_avg;
        differ |= hist.epochs[e].cond_avg !=
                  t1.per_edge.at(edge).epochs[e].cond_avg;
      }
    }
    CHECK(same);
    CHECK(differ);
  }
}
