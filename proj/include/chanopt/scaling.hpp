#pragma once

#include <map>
#include <string>

#include "chanopt/assignment.hpp"
#include "chanopt/graph.hpp"

namespace chanopt {

// One-shot width reduction from measured rank utilization:
//   final = round(base_size * (O + (1 - scale_fraction) * (1 - O)))
// where O is the highest output rank measure the layer reached (0..1) and
// scale_fraction in [0,1] dials the reduction from none (0) to full (1).
// Result is clamped to >= 1. Throws std::invalid_argument when base_size < 1
// or either real argument leaves [0,1].
int static_scale(int base_size, double max_output_rank, double scale_fraction);

// Applies static_scale per channel variable: O is the mean of the per-edge
// max output rank measures over the variable's layer group. Ranks are keyed
// by edge id; a grouped edge without a rank (or a variable without a baseline
// size) is rejected with IncompatibilityError. Variables owning no measurable
// layer keep their baseline size.
ConcreteSizes static_scale_network(
    const NetGraph& g, const ChannelAssignment& a,
    const ConcreteSizes& baseline_sizes,
    const std::map<std::string, double>& max_output_ranks,
    double scale_fraction);

// Uniform width multiplier: every size becomes round(size * multiplier),
// clamped to >= 1. Throws std::invalid_argument unless multiplier > 0.
ConcreteSizes compound_scale(const ConcreteSizes& sizes, double multiplier);

}  // namespace chanopt
