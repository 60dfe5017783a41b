#pragma once

#include <map>
#include <string>
#include <vector>

#include "chanopt/assignment.hpp"
#include "chanopt/metrics.hpp"

namespace chanopt {

// What one search trial hands back to the controller: per-epoch rank and
// condition metrics for every depth-changing edge, plus the training loss
// curve.
struct TrialMetrics {
  std::map<std::string, LayerMetricsHistory> per_edge;
  std::vector<double> train_loss;
};

// The training side of the search loop. Live SGD training, archive replay and
// scripted test doubles all implement this.
class TrialRunner {
 public:
  virtual ~TrialRunner() = default;
  // Instantiates (or looks up) a model at the given widths, runs `epochs`
  // training epochs, and returns the probe metrics. trial_index makes seeds
  // and logs per-trial deterministic.
  virtual TrialMetrics run_trial(const ConcreteSizes& sizes, int epochs,
                                 int trial_index) = 0;
};

}  // namespace chanopt
