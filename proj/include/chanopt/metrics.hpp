#pragma once

#include <limits>
#include <string>
#include <vector>

#include "chanopt/tensor.hpp"
#include "chanopt/vbrank.hpp"

namespace chanopt {

// Condition numbers are undefined when no components are retained (or when a
// side of a layer is all zero). The sentinel is +infinity: it orders above
// every finite threshold, which is exactly how an undefined conditioning must
// behave in shrink decisions, and it serializes as literal "inf".
constexpr double kUndefinedCondition = std::numeric_limits<double>::infinity();

// Fraction of channels that carry signal: estimated rank over channel count.
// estimated_rank must not exceed channel_size (internal consistency).
double rank_measure(const LowRankFactorization& f, int channel_size);

// Spread of the retained amplitudes: largest over smallest retained value.
// Returns kUndefinedCondition when nothing is retained.
double condition_measure(const LowRankFactorization& f);

// Per-layer probe results for one epoch. "in" comes from the input-channel
// unfolding (axis 3), "out" from the output-channel unfolding (axis 4).
struct LayerMetrics {
  double rank_in = 0.0;
  double rank_out = 0.0;
  double rank_avg = 0.0;
  double cond_in = kUndefinedCondition;
  double cond_out = kUndefinedCondition;
  double cond_avg = kUndefinedCondition;
};

// Runs the low-rank analysis on both channel unfoldings of a weight tensor.
// rank_avg is the plain mean of the two rank measures. cond_avg averages the
// defined sides only; it is the sentinel when both are undefined.
LayerMetrics layer_metrics(const ConvTensor& t);

// One layer's metrics across the epochs of a training run, in epoch order.
struct LayerMetricsHistory {
  std::vector<LayerMetrics> epochs;
  int epoch_count() const { return static_cast<int>(epochs.size()); }
};

// Smallest epoch t such that rank_avg rose by less than epsilon on each of
// the `window` steps ending at t; the last epoch if no such t exists (or the
// history is shorter than the window). window >= 1, epsilon > 0.
int plateau_epoch(const LayerMetricsHistory& h, int window = 3,
                  double epsilon = 1e-3);

// Average rank growth per epoch between two epochs: requires t2 > t1, both in
// range.
double rank_slope(const LayerMetricsHistory& h, int t1, int t2);

// CSV encoding of metric rows. One row per layer per epoch; floats rendered
// with format_g9, undefined conditions as "inf".
std::string metrics_csv_header();
std::string metrics_csv_row(int trial, int epoch, const std::string& layer_name,
                            const LayerMetrics& m);

}  // namespace chanopt
