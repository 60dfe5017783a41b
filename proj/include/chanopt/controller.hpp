#pragma once

#include <optional>
#include <string>
#include <vector>

#include "chanopt/assignment.hpp"
#include "chanopt/graph.hpp"
#include "chanopt/trial.hpp"

namespace chanopt {

// Rank-slope threshold presets, index 0..6: {0.0025, 0.005, 0.0075, 0.01,
// 0.015, 0.02, 0.025}.
double delta_preset(int index);

struct SearchConfig {
  double delta = 0.01;   // rank-slope threshold (preset 3)
  double mu = 50.0;      // condition-number threshold
  double gamma = 0.05;   // factor-scale floor; a variable freezes below it
  double phi_init = 0.2; // initial per-variable factor scale
  int epochs_per_trial = 20;
  int max_trials = 25;
  int min_channels = 1;
  int max_channels = 256;
  int initial_channel_size = 32;
  // Plateau detection inside each trial's rank history.
  int plateau_window = 3;
  double plateau_epsilon = 1e-3;
  // Optional upper bound on total parameters: an expansion that would cross
  // it is held back and the variable becomes shrink-only.
  std::optional<long long> max_params;

  // Throws std::invalid_argument on violated invariants (delta > 0,
  // 0 < gamma < phi_init <= 1, epochs_per_trial >= 2, max_trials >= 1,
  // 1 <= min_channels <= max_channels, initial size within bounds).
  void validate() const;
};

// Expand (+1) unless slope < delta or cond_avg > mu (an undefined condition
// counts as above every mu); then shrink (-1). The slope == delta boundary
// expands. Throws std::invalid_argument on non-finite slope or cond_avg <= 0.
int decide_action(double slope, double cond_avg, const SearchConfig& config);

// round(old_size * (1 + action*phi)), ties away from zero, clamped to
// [min_channels, max_channels]. action == 0 returns old_size exactly.
// Throws std::invalid_argument unless old_size >= 1, action in {-1,0,+1} and
// 0 < phi <= 1.
int update_channel(int old_size, int action, double phi,
                   const SearchConfig& config);

// The unrounded, unclamped update old_size * (1 + action*phi): expanding then
// shrinking at the same phi composes to old_size * (1 - phi^2).
double update_channel_exact(double old_size, int action, double phi);

// Per-variable controller state between trials.
struct LayerState {
  int size = 0;
  int last_action = 0;   // 0 until the first applied update
  double phi = 0.0;
  bool frozen = false;
  bool shrink_only = false;  // set by the parameter-budget guard
};

// One controller step: on an action reversal the factor scale halves first;
// if it falls below gamma the variable freezes (size unchanged, returns 0);
// otherwise the size update applies and the action is recorded. Returns the
// applied action. Throws std::logic_error if the state is already frozen.
int step_layer(LayerState& state, int action, const SearchConfig& config);

// Log entry for one variable in one trial.
struct VariableDecision {
  std::string variable;
  int old_size = 0;
  int new_size = 0;
  double slope = 0.0;     // mean rank slope over the variable's layer group
  double cond_avg = 0.0;  // mean final-epoch condition (may be the sentinel)
  int action = 0;         // applied action: +1 expand, -1 shrink, 0 hold
  double phi = 0.0;       // factor scale after this trial
  bool frozen = false;    // frozen as of the end of this trial
  bool budget_limited = false;
};

struct TrialRecord {
  int trial = 0;
  ConcreteSizes sizes_before;
  ConcreteSizes sizes_after;
  std::vector<VariableDecision> decisions;  // canonical variable order
  TrialMetrics metrics;
  long long params_after = 0;
};

struct SearchResult {
  ConcreteSizes final_sizes;
  std::vector<TrialRecord> trials;
  bool converged = false;  // every variable froze before the trial budget ran out
};

// The trial loop: starting from a uniform width, repeatedly train for a few
// epochs through `runner`, reduce each variable's layer-group metrics to a
// rank slope and a condition average, decide expand/shrink, and update sizes
// until every variable freezes or max_trials is reached. Deterministic given
// a deterministic runner. Trainer failures abort with the trial index in the
// message; metrics missing a grouped edge raise IncompatibilityError.
SearchResult channel_search(const NetGraph& g, const ChannelAssignment& a,
                            TrialRunner& runner, const SearchConfig& config);

}  // namespace chanopt
