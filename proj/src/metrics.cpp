#include "chanopt/metrics.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "chanopt/format.hpp"

namespace chanopt {

double rank_measure(const LowRankFactorization& f, int channel_size) {
  if (channel_size < 1) {
    throw std::invalid_argument("rank_measure: channel_size must be >= 1");
  }
  if (f.estimated_rank < 0 || f.estimated_rank > channel_size) {
    throw std::logic_error(
        "rank_measure: estimated rank " + std::to_string(f.estimated_rank) +
        " exceeds channel size " + std::to_string(channel_size));
  }
  return static_cast<double>(f.estimated_rank) / channel_size;
}

double condition_measure(const LowRankFactorization& f) {
  if (f.retained_values.empty()) return kUndefinedCondition;
  const double top = f.retained_values.front();
  const double bottom = f.retained_values.back();
  if (!(bottom > 0.0)) return kUndefinedCondition;
  return top / bottom;
}

LayerMetrics layer_metrics(const ConvTensor& t) {
  const UnfoldedMatrix in_view = unfold(t, 3);
  const UnfoldedMatrix out_view = unfold(t, 4);
  const LowRankFactorization in_fact = estimate_low_rank(in_view);
  const LowRankFactorization out_fact = estimate_low_rank(out_view);

  LayerMetrics m;
  m.rank_in = rank_measure(in_fact, t.dim(3));
  m.rank_out = rank_measure(out_fact, t.dim(4));
  m.rank_avg = 0.5 * (m.rank_in + m.rank_out);
  m.cond_in = condition_measure(in_fact);
  m.cond_out = condition_measure(out_fact);
  const bool in_ok = std::isfinite(m.cond_in);
  const bool out_ok = std::isfinite(m.cond_out);
  if (in_ok && out_ok) {
    m.cond_avg = 0.5 * (m.cond_in + m.cond_out);
  } else if (in_ok) {
    m.cond_avg = m.cond_in;
  } else if (out_ok) {
    m.cond_avg = m.cond_out;
  } else {
    m.cond_avg = kUndefinedCondition;
  }
  return m;
}

int plateau_epoch(const LayerMetricsHistory& h, int window, double epsilon) {
  if (h.epochs.empty()) {
    throw std::invalid_argument("plateau_epoch: empty history");
  }
  if (window < 1) {
    throw std::invalid_argument("plateau_epoch: window must be >= 1");
  }
  if (!(epsilon > 0.0)) {
    throw std::invalid_argument("plateau_epoch: epsilon must be > 0");
  }
  const int last = h.epoch_count() - 1;
  for (int t = window; t <= last; ++t) {
    bool flat = true;
    for (int j = t - window + 1; j <= t; ++j) {
      if (h.epochs[j].rank_avg - h.epochs[j - 1].rank_avg >= epsilon) {
        flat = false;
        break;
      }
    }
    if (flat) return t;
  }
  return last;
}

double rank_slope(const LayerMetricsHistory& h, int t1, int t2) {
  if (h.epoch_count() < 2) {
    throw std::invalid_argument("rank_slope: need at least 2 epochs");
  }
  if (t1 < 0 || t2 >= h.epoch_count() || t2 <= t1) {
    throw std::invalid_argument("rank_slope: need 0 <= t1 < t2 < epochs");
  }
  return (h.epochs[t2].rank_avg - h.epochs[t1].rank_avg) /
         static_cast<double>(t2 - t1);
}

std::string metrics_csv_header() {
  return "trial,epoch,layer_name,rank_in,rank_out,rank_avg,cond_in,cond_out,"
         "cond_avg";
}

std::string metrics_csv_row(int trial, int epoch, const std::string& layer_name,
                            const LayerMetrics& m) {
  std::string row = std::to_string(trial) + "," + std::to_string(epoch) + "," +
                    layer_name;
  for (double v : {m.rank_in, m.rank_out, m.rank_avg, m.cond_in, m.cond_out,
                   m.cond_avg}) {
    row += "," + format_g9(v);
  }
  return row;
}

}  // namespace chanopt
