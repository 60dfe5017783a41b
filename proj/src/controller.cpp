#include "chanopt/controller.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "chanopt/errors.hpp"
#include "chanopt/metrics.hpp"

namespace chanopt {

double delta_preset(int index) {
  static constexpr double kPresets[] = {0.0025, 0.005, 0.0075, 0.01,
                                        0.015,  0.02,  0.025};
  if (index < 0 || index > 6) {
    throw std::invalid_argument("delta_preset: index must be in 0..6");
  }
  return kPresets[index];
}

void SearchConfig::validate() const {
  if (!(delta > 0.0)) {
    throw std::invalid_argument("SearchConfig: delta must be > 0");
  }
  if (!(mu > 0.0)) {
    throw std::invalid_argument("SearchConfig: mu must be > 0");
  }
  if (!(gamma > 0.0) || !(gamma < phi_init) || !(phi_init <= 1.0)) {
    throw std::invalid_argument(
        "SearchConfig: need 0 < gamma < phi_init <= 1");
  }
  if (epochs_per_trial < 2) {
    throw std::invalid_argument("SearchConfig: epochs_per_trial must be >= 2");
  }
  if (max_trials < 1) {
    throw std::invalid_argument("SearchConfig: max_trials must be >= 1");
  }
  if (min_channels < 1 || max_channels < min_channels) {
    throw std::invalid_argument(
        "SearchConfig: need 1 <= min_channels <= max_channels");
  }
  if (initial_channel_size < min_channels ||
      initial_channel_size > max_channels) {
    throw std::invalid_argument(
        "SearchConfig: initial_channel_size outside the channel bounds");
  }
  if (plateau_window < 1 || !(plateau_epsilon > 0.0)) {
    throw std::invalid_argument("SearchConfig: bad plateau settings");
  }
  if (max_params && *max_params < 1) {
    throw std::invalid_argument("SearchConfig: max_params must be >= 1");
  }
}

int decide_action(double slope, double cond_avg, const SearchConfig& config) {
  if (!std::isfinite(slope)) {
    throw std::invalid_argument("decide_action: slope must be finite");
  }
  if (!(cond_avg > 0.0)) {  // +infinity (undefined condition) passes
    throw std::invalid_argument("decide_action: cond_avg must be positive");
  }
  if (slope < config.delta || cond_avg > config.mu) return -1;
  return +1;
}

double update_channel_exact(double old_size, int action, double phi) {
  return old_size * (1.0 + action * phi);
}

int update_channel(int old_size, int action, double phi,
                   const SearchConfig& config) {
  if (old_size < 1) {
    throw std::invalid_argument("update_channel: old_size must be >= 1");
  }
  if (action < -1 || action > 1) {
    throw std::invalid_argument("update_channel: action must be -1, 0 or +1");
  }
  if (!(phi > 0.0) || !(phi <= 1.0)) {
    throw std::invalid_argument("update_channel: need 0 < phi <= 1");
  }
  if (action == 0) return old_size;
  const long long n = std::llround(update_channel_exact(old_size, action, phi));
  return static_cast<int>(std::clamp<long long>(n, config.min_channels,
                                                config.max_channels));
}

int step_layer(LayerState& state, int action, const SearchConfig& config) {
  if (state.frozen) {
    throw std::logic_error("step_layer: variable is already frozen");
  }
  if (action != 1 && action != -1) {
    throw std::invalid_argument("step_layer: action must be +1 or -1");
  }
  if (action != state.last_action && state.last_action != 0) {
    state.phi /= 2.0;  // reversal halves the factor scale before the update
  }
  if (state.phi < config.gamma) {
    state.frozen = true;
    return 0;
  }
  state.size = update_channel(state.size, action, state.phi, config);
  state.last_action = action;
  return action;
}

namespace {

// Mean rank slope and mean final-epoch condition over one variable's layer
// group. Any undefined member condition makes the whole group undefined.
struct GroupSummary {
  double slope = 0.0;
  double cond_avg = 0.0;
};

GroupSummary summarize_group(const std::string& variable,
                             const std::vector<std::string>& edges,
                             const TrialMetrics& metrics,
                             const SearchConfig& config) {
  if (edges.empty()) {
    throw IncompatibilityError("channel_search: variable '" + variable +
                               "' owns no measurable layer");
  }
  GroupSummary out;
  for (const auto& eid : edges) {
    auto it = metrics.per_edge.find(eid);
    if (it == metrics.per_edge.end()) {
      throw IncompatibilityError(
          "channel_search: trial metrics are missing layer '" + eid + "'");
    }
    const LayerMetricsHistory& h = it->second;
    const int t2 = plateau_epoch(h, config.plateau_window,
                                 config.plateau_epsilon);
    out.slope += rank_slope(h, 0, t2);
    const double c = h.epochs.back().cond_avg;
    if (c == kUndefinedCondition) {
      out.cond_avg = kUndefinedCondition;
    } else if (out.cond_avg != kUndefinedCondition) {
      out.cond_avg += c / edges.size();
    }
  }
  out.slope /= edges.size();
  return out;
}

}  // namespace

SearchResult channel_search(const NetGraph& g, const ChannelAssignment& a,
                            TrialRunner& runner, const SearchConfig& config) {
  config.validate();
  const auto groups = layer_groups(g, a);

  std::map<std::string, LayerState> states;
  ConcreteSizes sizes = uniform_sizes(a, config.initial_channel_size);
  for (const auto& v : a.variables) {
    states[v] = LayerState{config.initial_channel_size, 0, config.phi_init,
                           false, false};
  }

  SearchResult result;
  for (int trial = 0; trial < config.max_trials; ++trial) {
    bool all_frozen = true;
    for (const auto& v : a.variables) {
      if (!states[v].frozen) all_frozen = false;
    }
    if (all_frozen) break;

    TrialRecord record;
    record.trial = trial;
    record.sizes_before = sizes;
    try {
      record.metrics = runner.run_trial(sizes, config.epochs_per_trial, trial);
    } catch (const TrainerFailure& e) {
      throw TrainerFailure("channel_search: trial " + std::to_string(trial) +
                           " failed: " + e.what());
    }

    // All metrics are in hand; apply decisions in canonical variable order.
    for (const auto& v : a.variables) {
      LayerState& st = states[v];
      VariableDecision d;
      d.variable = v;
      d.old_size = st.size;

      auto git = groups.find(v);
      const GroupSummary s = summarize_group(
          v, git == groups.end() ? std::vector<std::string>{} : git->second,
          record.metrics, config);
      d.slope = s.slope;
      d.cond_avg = s.cond_avg;

      if (st.frozen) {
        d.action = 0;
      } else {
        const int wanted = decide_action(s.slope, s.cond_avg, config);
        if (wanted == +1 && st.shrink_only) {
          d.action = 0;  // budget guard holds this variable back
          d.budget_limited = true;
        } else {
          LayerState tentative = st;
          const int applied = step_layer(tentative, wanted, config);
          if (applied == +1 && config.max_params) {
            ConcreteSizes projected = sizes;
            projected[v] = tentative.size;
            if (param_count(g, a, projected) > *config.max_params) {
              st.shrink_only = true;  // expansion discarded, state untouched
              d.action = 0;
              d.budget_limited = true;
            }
          }
          if (!d.budget_limited) {
            st = tentative;
            d.action = applied;
          }
        }
        sizes[v] = st.size;
      }
      d.new_size = st.size;
      d.phi = st.phi;
      d.frozen = st.frozen;
      record.decisions.push_back(std::move(d));
    }

    record.sizes_after = sizes;
    record.params_after = param_count(g, a, sizes);
    result.trials.push_back(std::move(record));
  }

  result.converged = std::all_of(
      a.variables.begin(), a.variables.end(),
      [&](const std::string& v) { return states[v].frozen; });
  result.final_sizes = sizes;
  return result;
}

}  // namespace chanopt
